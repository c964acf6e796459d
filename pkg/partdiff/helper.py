"""Helper functions."""
import asyncio
import hashlib
import os
import warnings
from typing import Any, Dict, Iterable, Optional

import numpy as np
import ujson
from tqdm import tqdm

from ._typings import Loop, Number, OptionalLoop

__all__ = ["Helper", "NO_PROGRESS_BAR", "USE_FLOAT32"]

NO_PROGRESS_BAR: bool = False
if os.getenv("PARTDIFF_NO_PROGRESS_BAR", "").lower() in ("1", "true"):
    NO_PROGRESS_BAR = True

USE_FLOAT32: bool = False
if os.getenv("PARTDIFF_FLOAT32", "").lower() in ("1", "true"):
    USE_FLOAT32 = True


class Helper:
    @staticmethod
    def ensure_loop(loop: OptionalLoop = None) -> Loop:
        """Helper method for checking if the loop is none and if so use asyncio.get_event_loop
        to retrieve it otherwise the loop is passed through.

        Emitters are driven from synchronous code, so when no loop is set for
        the current thread a new one is created and installed.
        """
        if loop is not None:
            return loop
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            try:
                return asyncio.get_event_loop()
            except RuntimeError:
                new_loop = asyncio.new_event_loop()
                asyncio.set_event_loop(new_loop)
                return new_loop

    @staticmethod
    def default_dtype() -> np.dtype:
        """Returns float64 unless PARTDIFF_FLOAT32 is set"""
        return np.dtype(np.float32) if USE_FLOAT32 else np.dtype(np.float64)

    @staticmethod
    def derive_seed(root: int, component: str, index: int = 0) -> int:
        """Derive a 64 bit sub-seed from the root seed by hashing (component, index)

        :param root: The root seed of the run
        :param component: Name of the consumer, e.g. "corpus" or "train-diffusion"
        :param index: Position of the consumer within its component
        :return: A non negative integer below 2**64
        """
        digest = hashlib.blake2b(
            f"{int(root)}:{component}:{int(index)}".encode("utf-8"), digest_size=8
        ).digest()
        return int.from_bytes(digest, "little")

    @staticmethod
    def rng(seed: int) -> np.random.Generator:
        """Counter based generator so that every derived stream is independent"""
        return np.random.Generator(np.random.Philox(int(seed) % (2 ** 64)))

    @staticmethod
    def config_hash(config: Dict[str, Any]) -> str:
        canonical = ujson.dumps(config, sort_keys=True)
        return hashlib.blake2b(canonical.encode("utf-8"), digest_size=16).hexdigest()

    @staticmethod
    def progress(
        iterable: Iterable[Any],
        desc: str,
        total: Optional[Number] = None,
        disable: bool = False,
    ) -> Iterable[Any]:
        """Wrap the iterable in a tqdm progress bar unless progress bars are disabled"""
        if NO_PROGRESS_BAR or disable:
            return iterable
        return tqdm(iterable, desc=desc, total=total, leave=False)
