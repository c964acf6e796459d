from typing import ClassVar, Type

from ._typings import EventType

__all__ = ["CodecEvents", "Events", "SamplerEvents", "TrainerEvents"]


class CodecEvents:
    KMeansIteration: EventType = "Codec.kmeansiteration"
    Epoch: EventType = "Codec.epoch"


class TrainerEvents:
    EpochStart: EventType = "Trainer.epochstart"
    Step: EventType = "Trainer.step"
    EpochEnd: EventType = "Trainer.epochend"
    Checkpoint: EventType = "Trainer.checkpoint"
    Diverged: EventType = "Trainer.diverged"


class SamplerEvents:
    ChainStart: EventType = "Sampler.chainstart"
    Step: EventType = "Sampler.step"
    ChainEnd: EventType = "Sampler.chainend"


class Events:
    Codec: ClassVar[Type[CodecEvents]] = CodecEvents
    Trainer: ClassVar[Type[TrainerEvents]] = TrainerEvents
    Sampler: ClassVar[Type[SamplerEvents]] = SamplerEvents
