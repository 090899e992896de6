"""Forced-prefix evaluation of attacked worlds, and factor-analysis export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import agent as ag
from .attack import AttackInstance, guide_prefix, post_attack_path
from .environment import World
from .metrics import ndtw, oracle_success, success
from .render import coverage_from_buffers
from .storage import atomic_write_bytes
from .worldgen import CATEGORIES, CATEGORY_WORDS

REFERENCES = ("attack", "original")
N_HEADING_BINS = 12

SYNONYMS = {cat: frozenset(words) for cat, words in CATEGORY_WORDS.items()}
SYNONYMS["tv_monitor"] = SYNONYMS["tv_monitor"] | {"television", "screen"}
SYNONYMS["sofa"] = SYNONYMS["sofa"] | {"settee"}

FACTOR_COLUMNS = ("instance_id", "attack", "category", "ndtw", "cov_vatk_pct", "cov_mean_pct",
                  "heading_entropy_nats", "object_mentioned")


@dataclass(frozen=True)
class EpisodeRow:
    episode_id: str
    path: tuple[int, ...]
    success: bool
    oracle_success: bool
    ndtw: float
    stopped_at_vatk: bool


@dataclass(frozen=True)
class MetricsReport:
    instance_id: str
    reference: str
    rows: tuple[EpisodeRow, ...]

    def _pct(self, attr: str) -> float:
        if not self.rows:
            return 0.0
        return 100.0 * float(np.mean([float(getattr(r, attr)) for r in self.rows]))

    @property
    def sr(self) -> float:
        return self._pct("success")

    @property
    def osr(self) -> float:
        return self._pct("oracle_success")

    @property
    def ndtw(self) -> float:
        return self._pct("ndtw")

    @property
    def stop_rate(self) -> float:
        return self._pct("stopped_at_vatk")

    def aggregates(self) -> dict:
        return {"sr": self.sr, "osr": self.osr, "ndtw": self.ndtw, "stop_rate": self.stop_rate}

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "reference": self.reference,
            "aggregates": self.aggregates(),
            "rows": [{"episode_id": r.episode_id, "path": list(r.path), "success": r.success,
                      "oracle_success": r.oracle_success, "ndtw": r.ndtw,
                      "stopped_at_vatk": r.stopped_at_vatk} for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rows = tuple(EpisodeRow(r["episode_id"], tuple(r["path"]), bool(r["success"]),
                                bool(r["oracle_success"]), float(r["ndtw"]), bool(r["stopped_at_vatk"]))
                     for r in d["rows"])
        return cls(d["instance_id"], d["reference"], rows)


def original_remainder(episode, v_atk: int) -> tuple[int, ...]:
    """The episode's own path from v_atk onward (v_atk included)."""
    traj = tuple(episode.trajectory)
    return traj[len(guide_prefix(traj, v_atk)) - 1:]


def evaluate_instance(params: ag.PolicyParams, world: World, instance: AttackInstance, episodes,
                      reference: str = "attack", max_steps: int = ag.MAX_STEPS) -> MetricsReport:
    """Force each episode's guide prefix in ``world``, then roll out freely from v_atk.

    The post-v_atk path is scored against the attack trajectory (``[v_atk]`` for
    stop attacks) or against the remainder of the episode's own trajectory.
    """
    if reference not in REFERENCES:
        raise ValueError(f"reference must be one of {REFERENCES}")
    nav = ag._Navigator(params, world)
    positions = world.graph.positions
    rows = []
    for ep in episodes:
        path = post_attack_path(nav, ep, instance.v_atk, max_steps)
        ref = instance.reference() if reference == "attack" else original_remainder(ep, instance.v_atk)
        rows.append(EpisodeRow(ep.episode_id, path, success(path, ref, positions),
                               oracle_success(path, ref, positions), ndtw(path, ref, positions),
                               len(path) == 1))
    return MetricsReport(instance.instance_id, reference, tuple(rows))


# --------------------------------------------------------------------------- factors


def entrance_bin(heading: float) -> int:
    return int(math.floor((heading % (2 * math.pi)) / (2 * math.pi / N_HEADING_BINS))) % N_HEADING_BINS


def heading_entropy(instance: AttackInstance, episodes, graph) -> float:
    """Shannon entropy (nats) of 30-degree entrance-heading bins at v_atk."""
    counts = np.zeros(N_HEADING_BINS)
    for ep in episodes:
        prefix = guide_prefix(ep.trajectory, instance.v_atk)
        if len(prefix) > 1:
            counts[entrance_bin(graph.heading(prefix[-2], prefix[-1]))] += 1
    if counts.sum() == 0:
        raise ValueError("no episode enters v_atk via an edge")
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0


def object_mentioned(instruction_tokens, category: str) -> bool:
    if category not in SYNONYMS:
        raise ValueError(f"unknown category {category!r}")
    return any(str(t).lower() in SYNONYMS[category] for t in instruction_tokens)


@dataclass(frozen=True)
class FactorRow:
    instance_id: str
    attack: int
    category: str
    ndtw: float
    cov_vatk_pct: float
    cov_mean_pct: float
    heading_entropy_nats: float
    object_mentioned: bool

    def __post_init__(self):
        if self.attack not in (0, 1):
            raise ValueError("attack must be 0 or 1")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        for name in ("cov_vatk_pct", "cov_mean_pct"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name} must lie in [0, 100]")
        if self.heading_entropy_nats < 0:
            raise ValueError("heading entropy must be non-negative")


def instance_coverages(world: World, instance: AttackInstance, steps_rendered: int = 3) -> tuple[float, float]:
    """Max-view coverage at v_atk and its mean over the rendered steps, in percent."""
    mask = world.scene.face_mask(instance.attack_object)
    nodes = instance.reference()[:steps_rendered]
    covs = [float(coverage_from_buffers(world.cache.buffers[n], mask).max()) for n in nodes]
    return 100.0 * covs[0], 100.0 * float(np.mean(covs))


def factor_rows(instance: AttackInstance, world: World, pre: MetricsReport, post: MetricsReport,
                steps_rendered: int = 3) -> tuple[FactorRow, FactorRow]:
    """The paired (unattacked, attacked) rows of one instance."""
    if pre.instance_id != instance.instance_id or post.instance_id != instance.instance_id:
        raise ValueError(f"reports are not aligned with instance {instance.instance_id}")
    cov_v, cov_m = instance_coverages(world, instance, steps_rendered)
    entering = [e for e in instance.support + (instance.test_episode,)
                if len(guide_prefix(e.trajectory, instance.v_atk)) > 1]
    entropy = heading_entropy(instance, entering, world.graph) if entering else 0.0
    mentioned = object_mentioned(instance.test_episode.instruction, instance.category)
    return tuple(FactorRow(instance.instance_id, flag, instance.category, rep.ndtw / 100.0, cov_v, cov_m,
                           entropy, mentioned) for flag, rep in ((0, pre), (1, post)))


def write_factors(rows, path) -> None:
    buf = io.StringIO(newline="")
    w = csv.writer(buf)
    w.writerow(FACTOR_COLUMNS)
    for r in rows:
        w.writerow([r.instance_id, r.attack, r.category, repr(r.ndtw), repr(r.cov_vatk_pct),
                    repr(r.cov_mean_pct), repr(r.heading_entropy_nats), int(r.object_mentioned)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_factors(path) -> list[FactorRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != FACTOR_COLUMNS:
            raise ValueError(f"unexpected factor header {header}")
        return [FactorRow(r[0], int(r[1]), r[2], float(r[3]), float(r[4]), float(r[5]), float(r[6]), r[7] == "1")
                for r in reader]


def export_factors(instances, pre_reports, post_reports, path, worlds: dict, steps_rendered: int = 3):
    """Write long-format paired factors (two rows per instance). Returns the rows."""
    if not (len(instances) == len(pre_reports) == len(post_reports)):
        raise ValueError("instances and reports have different lengths")
    rows = []
    for inst, pre, post in zip(instances, pre_reports, post_reports):
        rows.extend(factor_rows(inst, worlds[inst.env_id], pre, post, steps_rendered))
    write_factors(rows, path)
    return rows


def sign_test(before, after) -> float:
    """One-sided paired sign test that ``after`` exceeds ``before``; ties are dropped."""
    from scipy.stats import binomtest

    diff = np.asarray(after, dtype=float) - np.asarray(before, dtype=float)
    wins, n = int((diff > 0).sum()), int((diff != 0).sum())
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
