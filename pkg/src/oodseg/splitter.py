"""Stratified dataset splitting over grouped units.

Units (e.g. one animal's sections) carry per-class pixel-count histograms
and belong to groups (e.g. studies). Constraints:

* the test set takes whole groups, disjoint from the groups that feed
  train and val;
* train and val may share groups but never a unit.

The assignment minimizes

    sum over split pairs of W1(histogram_a, histogram_b)
      + 1.0 * sum over splits of |achieved mass ratio - target ratio|

by greedy local search over single-unit moves (train <-> val) and whole-
group moves (test <-> pool), accepting only strict improvements. The run is
deterministic for a given seed and the objective trace is non-increasing.

W1 compares histograms normalized to total mass 1 over the class *index*
axis: sum_j |CDF_a(j) - CDF_b(j)|. The value depends on how classes are
indexed; permuting the class order changes it in general.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SPLIT_NAMES = ("train", "val", "test")
RATIO_PENALTY = 1.0


@dataclass(frozen=True)
class SplitUnit:
    unit_id: str
    group_id: str
    counts: tuple  # per-class pixel counts

    def mass(self) -> float:
        return float(sum(self.counts))


def w1_histograms(a, b) -> float:
    """Wasserstein-1 distance between two class-count histograms after
    normalizing each to total mass 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("histograms must be 1-D with the same length")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("histograms must be non-negative")
    ta, tb = a.sum(), b.sum()
    if ta == 0 or tb == 0:
        raise ValueError("all-zero histogram has no distribution to compare")
    return float(np.abs(np.cumsum(a / ta) - np.cumsum(b / tb)).sum())


@dataclass
class SplitAssignment:
    assignment: dict            # unit_id -> split name
    achieved_ratios: dict       # split name -> mass fraction
    objective: float
    trace: list                 # objective after init and after every accepted move

    def units_in(self, split: str) -> list:
        return [u for u, s in self.assignment.items() if s == split]


class _State:
    def __init__(self, units, targets):
        self.units = units
        self.targets = targets
        self.total_mass = sum(u.mass() for u in units)
        self.n_classes = len(units[0].counts)
        self.hist = {s: np.zeros(self.n_classes) for s in SPLIT_NAMES}
        self.mass = {s: 0.0 for s in SPLIT_NAMES}
        self.where: dict[str, str] = {}

    def place(self, unit: SplitUnit, split: str):
        old = self.where.get(unit.unit_id)
        if old is not None:
            self.hist[old] -= unit.counts
            self.mass[old] -= unit.mass()
        self.hist[split] += np.asarray(unit.counts, dtype=np.float64)
        self.mass[split] += unit.mass()
        self.where[unit.unit_id] = split

    def objective(self) -> float:
        pair_cost = 0.0
        for i, a in enumerate(SPLIT_NAMES):
            for b in SPLIT_NAMES[i + 1 :]:
                if self.hist[a].sum() == 0 or self.hist[b].sum() == 0:
                    pair_cost += 1.0  # an empty split is maximally unfaithful
                else:
                    pair_cost += w1_histograms(self.hist[a], self.hist[b])
        ratio_cost = sum(
            abs(self.mass[s] / self.total_mass - self.targets[s]) for s in SPLIT_NAMES
        )
        return pair_cost + RATIO_PENALTY * ratio_cost

    def validate(self):
        test_groups = {u.group_id for u in self.units if self.where[u.unit_id] == "test"}
        for u in self.units:
            if self.where[u.unit_id] != "test" and u.group_id in test_groups:
                raise AssertionError("constraint violated: test group leaked into train/val")


def stratified_split(
    units: list,
    ratios: tuple = (0.70, 0.15, 0.15),
    seed: int = 0,
    max_passes: int = 60,
) -> SplitAssignment:
    """Assign units to train/val/test under the group constraints (see the
    module docstring). Requires at least 3 distinct groups."""
    if len(units) < 3:
        raise ValueError("need at least 3 units")
    if len({u.unit_id for u in units}) != len(units):
        raise ValueError("duplicate unit ids")
    groups: dict[str, list] = {}
    for u in units:
        groups.setdefault(u.group_id, []).append(u)
    if len(groups) < 3:
        raise ValueError("need at least 3 groups to honor the split constraints")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive and sum to 1")
    targets = dict(zip(SPLIT_NAMES, ratios))

    rng = np.random.default_rng(seed)
    state = _State(units, targets)
    unit_by_id = {u.unit_id: u for u in units}
    # sorted base order everywhere so the seeded shuffles, and therefore the
    # whole run, do not depend on the caller's unit order
    group_ids = sorted(groups)

    # seed assignment: walk the groups in seeded order and take one into test
    # whenever that brings the test mass closer to its target; overshooting
    # groups are skipped so the greedy phase never has to dig out of a badly
    # oversized test set one costly move at a time
    shuffled = list(group_ids)
    rng.shuffle(shuffled)
    group_mass = {gid: sum(u.mass() for u in groups[gid]) for gid in group_ids}
    test_target_mass = targets["test"] * state.total_mass
    test_groups = set()
    test_mass = 0.0
    for gid in shuffled:
        if len(test_groups) == len(groups) - 1:
            break  # leave at least one group for train/val
        if abs(test_mass + group_mass[gid] - test_target_mass) < abs(test_mass - test_target_mass):
            test_groups.add(gid)
            test_mass += group_mass[gid]
    if not test_groups:
        # every group alone overshoots; take the least bad one
        test_groups.add(min(shuffled, key=lambda gid: abs(group_mass[gid] - test_target_mass)))

    pool = [u for gid in group_ids if gid not in test_groups for u in sorted(groups[gid], key=lambda u: u.unit_id)]
    pool_order = list(pool)
    rng.shuffle(pool_order)
    train_target = targets["train"] / (targets["train"] + targets["val"])
    train_mass = val_mass = 0.0
    for u in pool_order:
        total = train_mass + val_mass
        if total == 0 or train_mass / total < train_target:
            state.place(u, "train")
            train_mass += u.mass()
        else:
            state.place(u, "val")
            val_mass += u.mass()
    for gid in test_groups:
        for u in sorted(groups[gid], key=lambda u: u.unit_id):
            state.place(u, "test")

    current = state.objective()
    trace = [current]
    state.validate()

    def candidate_moves():
        moves = []
        for uid in sorted(state.where):
            split = state.where[uid]
            if split == "train":
                moves.append(("unit", uid, "val"))
            elif split == "val":
                moves.append(("unit", uid, "train"))
        for gid in group_ids:
            if all(state.where[u.unit_id] == "test" for u in groups[gid]):
                moves.append(("group_out", gid, "train"))
            else:
                moves.append(("group_in", gid, "test"))
        return moves

    def apply(move):
        kind, target_id, dest = move
        if kind == "unit":
            state.place(unit_by_id[target_id], dest)
        elif kind == "group_in":
            for u in groups[target_id]:
                state.place(u, "test")
        else:
            for u in groups[target_id]:
                state.place(u, dest)

    def undo_snapshot():
        return dict(state.where)

    def restore(snapshot):
        for uid, split in snapshot.items():
            if state.where[uid] != split:
                state.place(unit_by_id[uid], split)

    for _ in range(max_passes):
        improved = False
        moves = candidate_moves()
        order = rng.permutation(len(moves))
        for mi in order:
            move = moves[mi]
            # moves are enumerated once per pass, so an accepted group move can
            # stale later entries; applying a stale one would split a group
            # across the test boundary
            if move[0] == "unit":
                if state.where[move[1]] == "test":
                    continue
            elif move[0] == "group_in":
                if all(state.where[u.unit_id] == "test" for u in groups[move[1]]):
                    continue
                # cannot move the last non-test group into test
                non_test = [g for g in group_ids if any(state.where[u.unit_id] != "test" for u in groups[g])]
                if len(non_test) <= 1 and move[1] in non_test:
                    continue
            else:
                if any(state.where[u.unit_id] != "test" for u in groups[move[1]]):
                    continue
            snapshot = undo_snapshot()
            apply(move)
            new = state.objective()
            if new < current - 1e-12:
                current = new
                trace.append(current)
                state.validate()
                improved = True
            else:
                restore(snapshot)
        if not improved:
            break

    achieved = {s: state.mass[s] / state.total_mass for s in SPLIT_NAMES}
    return SplitAssignment(
        assignment=dict(state.where),
        achieved_ratios=achieved,
        objective=current,
        trace=trace,
    )


def read_units_csv(path) -> list:
    """CSV columns: unit, group, then one count column per class."""
    units = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) < 3 or header[0] != "unit" or header[1] != "group":
            raise ValueError("units CSV must start with columns: unit, group, count...")
        for row in reader:
            if not row:
                continue
            units.append(SplitUnit(row[0], row[1], tuple(int(v) for v in row[2:])))
    return units


def write_assignment_csv(path, result: SplitAssignment) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["unit", "split"])
        for uid in sorted(result.assignment):
            writer.writerow([uid, result.assignment[uid]])


def write_trace(path, result: SplitAssignment) -> None:
    with open(path, "w") as f:
        f.write("step,objective\n")
        for i, v in enumerate(result.trace):
            f.write(f"{i},{v!r}\n")
