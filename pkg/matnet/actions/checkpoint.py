"""Module holding the CheckpointAction class"""

import glob
import os
import re
from typing import Optional

import numpy as np

from matnet.actions.action import Action, stride_matches
from matnet.model import MatNet, save_checkpoint
from matnet.optimizer import PREFIX, OptimState

UPDATE_KEY = f"{PREFIX}update"
_CKPT_RE = re.compile(r"ckpt_(\d+)\.mtn$")


def checkpoint_name(directory: str, step: int) -> str:
    return os.path.join(directory, f"ckpt_{step:08d}.mtn")


def latest_checkpoint(directory: str) -> Optional[str]:
    """Checkpoint of the highest update in directory, None if there is none"""
    found = []
    for path in glob.glob(os.path.join(directory, "ckpt_*.mtn")):
        match = _CKPT_RE.search(path)
        if match:
            found.append((int(match.group(1)), path))
    return max(found)[1] if found else None


class CheckpointAction(Action):
    """Save model parameters and optimizer state

    Every checkpoint carries the effective configuration as manifest.

    :param net: model to save
    :param state: optimizer state to save with it
    :param directory: folder of the checkpoint files
    :param config_text: canonical configuration text
    :param stride: save every n updates, 0 for the end only
    """

    def __init__(
        self,
        net: MatNet,
        state: OptimState,
        directory: str,
        config_text: str,
        stride: int = 0,
    ) -> None:
        print("Setting up checkpoints")
        self.net = net
        self.state = state
        self.directory = directory
        self.config_text = config_text
        self.stride = stride
        self.last_step: int = 0
        os.makedirs(directory, exist_ok=True)
        if stride:
            print(f"Saving every {stride} updates to '{os.path.join(directory, 'ckpt_{update}.mtn')}'")
        print(f"Saving the final state to '{os.path.join(directory, 'final.mtn')}'")
        print()

    def run(self, step: int) -> None:
        if stride_matches(step, self.stride):
            self.save(checkpoint_name(self.directory, step), step)

    def final_run(self, step: int) -> None:
        if self.last_step != step:
            self.save(checkpoint_name(self.directory, step), step)
        self.save(os.path.join(self.directory, "final.mtn"), step)

    def save(self, path: str, step: int) -> None:
        extra = self.state.arrays()
        extra[UPDATE_KEY] = np.array([step])
        save_checkpoint(path, self.net, self.config_text, extra)
        self.last_step = step
