"""Module containing the abstract base class for all actions

Also has helper functions used by multiple actions"""

from typing import Optional


class Action:
    """Abstract base class for all actions

    Actions are run once per parameter update in the order they were set up.
    """

    def run(self, step: int):
        """Needs to be defined for all actions

        :param step: current update, starting at 1
        """
        raise NotImplementedError()

    def final_run(self, step: int):
        """If not implemented, do nothing

        :param step: last update
        """
        pass


def stride_matches(step: int, stride: Optional[int]) -> bool:
    """If an action with the given stride is due at step (never for stride 0 / None)"""
    return bool(stride) and step % stride == 0  # type: ignore
