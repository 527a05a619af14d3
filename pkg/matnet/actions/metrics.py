"""Module holding the MetricsAction class"""

import time
from typing import List, Optional

from matnet.actions.action import Action
from matnet.actions.sgvb_update import SgvbUpdate
from matnet.helpers.misc import append_rows, initialize_file

METRICS_FIELDS = ["update", "loss", "recon", "kl_total", "reg_term"]
TIMING_FIELDS = ["update", "wall_ms"]


class MetricsAction(Action):
    """Log the terms of the objective after every update

    Wall time goes to a separate file, so the metrics file of two runs with
    identical seeds is identical.

    :param update: the training action providing the statistics
    :param filename: csv file for the metrics, optional
    :param timing_filename: csv file for the wall time per update, optional
    :param append: continue existing files instead of starting new ones
    """

    def __init__(
        self,
        update: SgvbUpdate,
        filename: Optional[str] = None,
        timing_filename: Optional[str] = None,
        append: bool = False,
    ) -> None:
        print("Setting up logging of the training metrics")
        self.update = update
        self.filename = filename
        self.timing_filename = timing_filename
        self.rows: List[list] = []
        self.skipped: int = 0
        self._last_time = time.perf_counter()
        if filename:
            if not append:
                initialize_file(filename, METRICS_FIELDS)
            print(f"Saving '{','.join(METRICS_FIELDS)}' of every update to '{filename}'")
        if timing_filename and not append:
            initialize_file(timing_filename, TIMING_FIELDS)
        print()

    def run(self, step: int) -> None:
        stats = self.update.stats
        row = [step, stats.loss, stats.recon, stats.kl_total, stats.reg_term]  # type: ignore
        if not stats.applied:  # type: ignore
            self.skipped += 1
        self.rows.append(row)
        now = time.perf_counter()
        wall_ms = (now - self._last_time) * 1000
        self._last_time = now
        if self.filename:
            append_rows(self.filename, [row])
        if self.timing_filename:
            append_rows(self.timing_filename, [[step, wall_ms]])

    def final_run(self, step: int) -> None:
        if self.skipped:
            print(f"{self.skipped} update(s) were skipped because of non-finite gradients")
