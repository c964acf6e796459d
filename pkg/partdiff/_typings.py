from asyncio import AbstractEventLoop
from typing import ClassVar, List, Optional, Tuple, Union

import numpy as np

__all__ = [
    "EventType",
    "FloatArray",
    "IntArray",
    "Loop",
    "Number",
    "OptionalLoop",
    "PointArray",
    "Shape",
    "Shape3",
    "SlotsT",
]


Number = Union[float, int]
SlotsT = List[str]
Loop = AbstractEventLoop
EventType = ClassVar[str]

Shape = Tuple[int, ...]
Shape3 = Tuple[int, int, int]

FloatArray = np.ndarray
IntArray = np.ndarray
# (n, 3) float coordinates
PointArray = np.ndarray

OptionalLoop = Optional[Loop]
