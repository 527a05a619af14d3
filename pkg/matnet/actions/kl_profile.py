"""Module holding the KlProfileAction class

Also holds the KlProfile container and functions to export and plot it
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
import matplotlib.pyplot as plt

from matnet.archive import DataError
from matnet.actions.action import Action
from matnet.actions.sgvb_update import SgvbUpdate
from matnet.helpers.misc import append_rows, backup_if_exists, initialize_file, read_csv

log = logging.getLogger(__name__)


class KlProfile:
    """Per latent layer KL divergences over the course of training

    :param labels: meta-module label of every layer, z_0 first
    :param updates: update index of every row
    :param rows: KL means in nats, one column per layer
    """

    def __init__(self, labels: Sequence[str]) -> None:
        self.labels = list(labels)
        self.updates: List[int] = []
        self.rows: List[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def depth(self) -> int:
        """Number of latent layers below z_0"""
        return len(self.labels) - 1

    def header(self) -> List[str]:
        return ["update"] + [f"module_{i}" for i in range(len(self.labels))] + ["total"]

    def append(self, update: int, kls: np.ndarray) -> None:
        """Add one row

        :raises ValueError: if the number of layers does not match
        """
        kls = np.asarray(kls, dtype=np.float64)
        if kls.shape != (len(self.labels),):
            raise ValueError(f"Expected {len(self.labels)} KL values, got shape {kls.shape}")
        self.updates.append(int(update))
        self.rows.append(kls)

    def table(self) -> np.ndarray:
        """(rows, layers) array of all KL values"""
        return np.array(self.rows).reshape(len(self.rows), len(self.labels))

    def totals(self) -> np.ndarray:
        return self.table().sum(axis=1)

    def csv_rows(self, start: int = 0) -> List[list]:
        return [[u] + list(kls) + [float(np.sum(kls))] for u, kls in zip(self.updates[start:], self.rows[start:])]

    def merge(self, other: "KlProfile") -> None:
        """Append the rows of another profile of the same model layout

        :raises DataError: if the layer counts differ
        """
        if len(other.labels) != len(self.labels):
            raise DataError(f"Cannot merge profiles with {len(self.labels)} and {len(other.labels)} layers")
        for u, kls in zip(other.updates, other.rows):
            self.append(u, kls)

    def plot(self, filename: str, title: Optional[str] = None) -> None:
        """Stacked area plot of the per layer KL, grouped by meta-module"""
        plot_kl_profile(self, filename, title)


def kl_profile_export(profile: KlProfile, path: str) -> None:
    """Write the profile as csv with header update, module_0 .. module_d, total

    :raises ValueError: for an empty profile
    """
    if not len(profile):
        raise ValueError("Cannot export an empty KL profile")
    initialize_file(path, profile.header())
    append_rows(path, profile.csv_rows())


def read_kl_profile(path: str, labels: Optional[Sequence[str]] = None) -> KlProfile:
    """Read a profile written by kl_profile_export

    :param labels: meta-module labels of the layers, generic ones if not given
    :raises DataError: for a malformed header or rows
    """
    lines = read_csv(path)
    if not lines or lines[0][0] != "update" or lines[0][-1] != "total":
        raise DataError(f"'{path}' is no KL profile")
    n_layers = len(lines[0]) - 2
    profile = KlProfile(labels or [f"module_{i}" for i in range(n_layers)])
    for row in lines[1:]:
        if len(row) != n_layers + 2:
            raise DataError(f"'{path}': row with {len(row)} instead of {n_layers + 2} columns")
        try:
            profile.append(int(row[0]), np.array([float(v) for v in row[1:-1]]))
        except ValueError as e:
            raise DataError(f"'{path}': {e}") from e
    return profile


def plot_kl_profile(profile: KlProfile, filename: str, title: Optional[str] = None) -> None:
    """Stacked area plot of the KL per layer over the updates

    Layers of the same meta-module share a color, light lines separate the
    layers and dark lines the meta-modules.
    """
    table = profile.table()
    groups = list(dict.fromkeys(profile.labels))
    cmap = plt.get_cmap("tab10")
    colors = [cmap(groups.index(label) % 10) for label in profile.labels]

    fig = plt.figure(figsize=(8, 4), dpi=100)
    ax = plt.axes()
    ax.stackplot(profile.updates, table.T, colors=colors, linewidth=0)
    tops = np.cumsum(table, axis=1)
    for i in range(len(profile.labels)):
        last_of_group = i == len(profile.labels) - 1 or profile.labels[i + 1] != profile.labels[i]
        if last_of_group:
            ax.plot(profile.updates, tops[:, i], color="black", linewidth=0.8)
        else:
            ax.plot(profile.updates, tops[:, i], color="white", linewidth=0.4)
    handles = [plt.Rectangle((0, 0), 1, 1, color=cmap(i % 10)) for i in range(len(groups))]
    ax.legend(handles, groups, title=title)
    ax.set_xlabel("update")
    ax.set_ylabel("KL (nats)")
    backup_if_exists(filename)
    fig.savefig(filename)
    plt.close(fig)


class KlProfileAction(Action):
    """Track the per layer KL of every update

    :param update: the training action providing the statistics
    :param labels: meta-module label of every layer
    :param filename: csv file the rows are appended to, optional
    :param plot_filename: file for the stacked area plot at the end, optional
    :param append: continue an existing csv file instead of starting a new one
    """

    def __init__(
        self,
        update: SgvbUpdate,
        labels: Sequence[str],
        filename: Optional[str] = None,
        plot_filename: Optional[str] = None,
        append: bool = False,
    ) -> None:
        print("Setting up tracking of the KL profile")
        self.update = update
        self.profile = KlProfile(labels)
        self.filename = filename
        self.plot_filename = plot_filename
        if filename:
            if not append:
                initialize_file(filename, self.profile.header())
            print(f"Saving the per layer KL of every update to '{filename}'")
        if plot_filename:
            print(f"Plotting the profile to '{plot_filename}' at the end")
        print()

    def run(self, step: int) -> None:
        self.profile.append(step, self.update.stats.layer_kls)  # type: ignore
        if self.filename:
            append_rows(self.filename, self.profile.csv_rows(len(self.profile) - 1))

    def final_run(self, step: int) -> None:
        if self.plot_filename and len(self.profile):
            self.profile.plot(self.plot_filename)
