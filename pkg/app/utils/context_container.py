# app/utils/context_container.py

from typing import Any, Dict, Optional
import logging

import numpy as np

from app.utils import constants
from app.utils.error_handler import ContractError

logger = logging.getLogger(__name__)


class RunContext:
    """
    Randomness and stage bookkeeping for one command invocation.

    Every random draw flows from the global seed through a named sub-stream,
    so two runs that differ on one ablated axis consume identical randomness
    everywhere else.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.stage_outputs: Dict[str, Any] = {}
        self.metadata = {"seed": self.seed, "stages_completed": []}

    def rng(self, stream: str, *keys: int) -> np.random.Generator:
        """Independent generator for (stream, *keys); same arguments, same draws"""
        if stream not in constants.RANDOM_STREAMS:
            raise ContractError(f"unknown random stream '{stream}'; known: {sorted(constants.RANDOM_STREAMS)}")
        spawn_key = (constants.RANDOM_STREAMS[stream], *(int(k) for k in keys))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=spawn_key)))

    def store_stage_output(self, stage: str, output: Any) -> None:
        self.stage_outputs[stage] = output
        self.metadata["stages_completed"].append(stage)
        logger.info(f"Stage '{stage}' output stored")

    def get_stage_output(self, stage: str) -> Optional[Any]:
        return self.stage_outputs.get(stage)


def create_run_context(seed: int = 0) -> RunContext:
    return RunContext(seed)
