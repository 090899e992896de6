"""Object-texture attacks: instance construction and masked, L-inf projected Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import agent as ag
from .environment import World
from .metrics import ndtw
from .render import backprop_to_texture, coverage_from_buffers
from .worldgen import CATEGORIES, Episode, shortest_path, stable_hash

logger = logging.getLogger(__name__)

VISIBILITY_THRESHOLD = 0.40
MIN_SUPPORT = 5
FAR_GOAL_DISTANCE = 3.0
MODES = ("stop", "trajectory")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 300
    batch_size: int = 16
    checkpoint_every: int = 30
    steps_rendered: int = 3
    mode: str = "trajectory"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise AttackError("epsilon out of range")
        if self.lr < 0:
            raise AttackError("lr out of range")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise AttackError("beta1/beta2 out of range")
        if self.checkpoint_every < 1 or self.iterations < 1 or self.iterations % self.checkpoint_every:
            raise AttackError("iterations must be a positive multiple of checkpoint_every")
        if self.batch_size < 1:
            raise AttackError("batch_size out of range")
        if self.steps_rendered not in (1, 2, 3):
            raise AttackError("steps_rendered must be 1, 2 or 3")
        if self.mode not in MODES:
            raise AttackError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class AttackInstance:
    instance_id: str
    env_id: str
    mode: str
    test_episode: Episode
    attack_object: int
    category: str
    visibility: float
    v_atk: int
    attack_trajectory: tuple[int, ...]
    train_split: tuple[Episode, ...]
    val_split: tuple[Episode, ...]

    @property
    def support(self) -> tuple[Episode, ...]:
        return self.train_split + self.val_split

    def reference(self) -> tuple[int, ...]:
        """Path the attacked agent should take from v_atk (just v_atk for stop attacks)."""
        return self.attack_trajectory if self.attack_trajectory else (self.v_atk,)


@dataclass(frozen=True)
class Rejection:
    episode_id: str
    reason: str


@dataclass
class AttackCheckpoint:
    iteration: int
    score: float
    texels: np.ndarray = field(repr=False)


def guide_prefix(trajectory, v_atk: int) -> tuple[int, ...]:
    """Trajectory up to and including the first visit of ``v_atk``."""
    traj = tuple(trajectory)
    if v_atk not in traj:
        raise AttackError(f"trajectory does not pass through v_atk={v_atk}")
    return traj[: traj.index(v_atk) + 1]


# --------------------------------------------------------------------------- instance generation


def candidate_objects(world: World, threshold: float = VISIBILITY_THRESHOLD) -> dict[int, list[tuple[int, float]]]:
    """Per node, objects whose best single-view coverage is at least ``threshold``.

    Lists are ordered by coverage (descending) then object id.
    """
    scene = world.scene
    masks = {oid: scene.face_mask(oid) for oid in sorted(scene.objects)
             if scene.objects[oid].category in CATEGORIES}
    out = {}
    for node in range(world.graph.num_nodes):
        found = []
        for oid, mask in masks.items():
            cov = float(coverage_from_buffers(world.cache.buffers[node], mask).max())
            if cov >= threshold:
                found.append((oid, cov))
        out[node] = sorted(found, key=lambda x: (-x[1], x[0]))
    return out


def _far_goal(world: World, v_atk: int, v_k: int, key: str) -> tuple[int, ...] | None:
    graph = world.graph
    far = [n for n in range(graph.num_nodes)
           if n != v_atk and np.linalg.norm(graph.positions[n] - graph.positions[v_k]) >= FAR_GOAL_DISTANCE]
    if not far:
        return None
    paths = [shortest_path(graph, v_atk, n) for n in far]
    preferred = [p for p in paths if 2 <= len(p) - 1 <= 4] or paths
    return preferred[stable_hash(key) % len(preferred)]


def build_attack_instance(test_episode: Episode, train_episodes, world: World, mode: str,
                          candidates: dict | None = None):
    """Select v_atk, the attack object and the attack trajectory for one test episode.

    Returns an :class:`AttackInstance`, or a :class:`Rejection` with reason
    ``no_candidate`` or ``no_far_goal``.
    """
    if mode not in MODES:
        raise AttackError(f"mode must be one of {MODES}")
    candidates = candidate_objects(world) if candidates is None else candidates
    traj = test_episode.trajectory
    pool = [e for e in train_episodes if e.env_id == test_episode.env_id]
    best = None
    for pos, v in enumerate(traj):
        if mode == "stop" and pos == len(traj) - 1:
            continue  # the test episode already stops here
        if not candidates.get(v):
            continue
        test_guide = traj[: pos + 1]
        support = [e for e in pool if v in e.trajectory and guide_prefix(e.trajectory, v) != test_guide]
        if mode == "stop":
            support = [e for e in support if e.trajectory[-1] != v]
        if len(support) < MIN_SUPPORT:
            continue
        oid, cov = candidates[v][0]
        key = (-cov, oid, pos)
        if best is None or key < best[0]:
            best = (key, v, oid, cov, support)
    if best is None:
        return Rejection(test_episode.episode_id, "no_candidate")
    _, v_atk, oid, cov, support = best

    if mode == "trajectory":
        attack_traj = _far_goal(world, v_atk, traj[-1], test_episode.episode_id)
        if attack_traj is None:
            return Rejection(test_episode.episode_id, "no_far_goal")
    else:
        attack_traj = ()

    support = sorted(support, key=lambda e: (stable_hash(e.episode_id), e.episode_id))
    n_val = max(1, int(round(0.2 * len(support))))
    return AttackInstance(
        instance_id=f"{mode}:{test_episode.episode_id}",
        env_id=test_episode.env_id,
        mode=mode,
        test_episode=test_episode,
        attack_object=oid,
        category=world.scene.objects[oid].category,
        visibility=cov,
        v_atk=v_atk,
        attack_trajectory=tuple(attack_traj),
        train_split=tuple(support[:-n_val]),
        val_split=tuple(support[-n_val:]),
    )


# --------------------------------------------------------------------------- loss


class AttackObjective:
    """Cross-entropy of following the attack trajectory, differentiable w.r.t. the atlas.

    Everything that does not depend on the atlas is computed once: instruction
    encodings, and the teacher-forced history up to (not including) v_atk on
    unattacked observations.
    """

    def __init__(self, params: ag.PolicyParams, world: World, instance: AttackInstance, steps_rendered: int = 3):
        self.params = params
        self.p = params.tensors()
        self.world = world
        self.instance = instance
        self.steps_rendered = steps_rendered
        self.face_mask = world.scene.face_mask(instance.attack_object)
        graph = world.graph
        if instance.attack_trajectory:
            nodes = list(instance.attack_trajectory)
            targets = [graph.neighbors(u).index(v) for u, v in zip(nodes, nodes[1:])] + [ag.STOP]
        else:
            nodes, targets = [instance.v_atk], [ag.STOP]
        self.nodes = nodes
        self.targets = [len(graph.neighbors(n)) if t == ag.STOP else t for n, t in zip(nodes, targets)]
        self.live = [(k, node, world.views_showing(node, instance.attack_object))
                     for k, node in enumerate(nodes[:steps_rendered])]
        self.live = [x for x in self.live if x[2]]
        self._nav = ag._Navigator(params, world)
        self._prep = {}

    def _prepare(self, episode: Episode):
        if episode.episode_id not in self._prep:
            prefix = guide_prefix(episode.trajectory, self.instance.v_atk)
            instr = self._nav.instruction(episode.instruction)
            if len(prefix) > 1:
                h, heading = self._nav.forced(instr, prefix[:-1])
                heading = self.world.graph.heading(prefix[-2], prefix[-1])
            else:
                h, heading = torch.zeros(self.params.dim, dtype=ag.DTYPE), 0.0
            self._prep[episode.episode_id] = (instr, h, heading)
        return self._prep[episode.episode_id]

    def __call__(self, texels: np.ndarray, episodes, need_grad: bool = True):
        """Batch-mean loss and its masked gradient w.r.t. ``texels`` (None if not requested)."""
        for ep in episodes:
            if self.instance.v_atk not in ep.trajectory:
                raise AttackError(f"episode {ep.episode_id} does not pass through v_atk")
        prep = [self._prepare(ep) for ep in episodes]
        instr = torch.stack([x[0] for x in prep])
        h = torch.stack([x[1] for x in prep])
        headings = np.array([x[2] for x in prep])

        pixels = {}
        for k, node, views in self.live:
            imgs = np.stack([self.world.cache.shade_views(node, [v], texels)[0] for v in views])
            pixels[k] = torch.tensor(imgs, dtype=ag.DTYPE, requires_grad=need_grad)

        graph = self.world.graph
        loss = instr.new_zeros(len(episodes))
        for k, node in enumerate(self.nodes):
            raw = torch.as_tensor(self.world.raw[node], dtype=ag.DTYPE)
            if k in pixels:
                views = dict((kk, vv) for kk, _, vv in self.live)[k]
                raw = raw.index_put((torch.as_tensor(views),), ag._patch_means_t(pixels[k]))
            ids, heads, elevs, vidx = self._nav.candidates(node)
            if k > 0:
                headings = np.full(len(episodes), graph.heading(self.nodes[k - 1], node))
            dirs = ag.direction_encoding(np.asarray(heads)[None, :] - headings[:, None],
                                         np.broadcast_to(elevs, (len(episodes), len(elevs))))
            cand, pooled = ag._project(self.p, raw.mean(0), raw[vidx], torch.as_tensor(dirs, dtype=ag.DTYPE))
            logits, h = ag._step(self.p, instr, h, pooled.expand(len(episodes), -1), cand)
            target = torch.full((len(episodes),), self.targets[k], dtype=torch.long)
            loss = loss + torch.nn.functional.cross_entropy(logits, target, reduction="none")
        loss = loss.mean()
        if not need_grad:
            return float(loss), None
        grad = np.zeros_like(texels)
        if pixels:
            loss.backward()
            for k, node, views in self.live:
                g = pixels[k].grad.numpy()
                for j, v in enumerate(views):
                    grad += backprop_to_texture(self.world.cache.buffers[node][v], g[j], self.face_mask)
        return float(loss.detach()), grad


def attack_loss(params: ag.PolicyParams, world: World, instance: AttackInstance, episode_batch,
                steps_rendered: int = 3, texels: np.ndarray | None = None):
    """Batch-mean attack cross-entropy and its masked atlas gradient."""
    objective = AttackObjective(params, world, instance, steps_rendered)
    texels = world.scene.atlas.texels if texels is None else texels
    return objective(texels, episode_batch)


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    mask: np.ndarray  # (H, W) texels the optimizer may touch
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, mask: np.ndarray) -> "AdamState":
        shape = mask.shape + (3,)
        return cls(mask.astype(bool), np.zeros(shape), np.zeros(shape), 0)


def project(proposed, original, epsilon: float):
    """Clip to the L-inf ball around ``original`` and then to valid colours."""
    return np.clip(np.clip(proposed, original - epsilon, original + epsilon), 0.0, 1.0)


def adam_project_step(atlas: np.ndarray, original: np.ndarray, grad: np.ndarray, state: AdamState,
                      config: AttackConfig, adam_eps: float = 1e-8):
    """One bias-corrected Adam step on masked texels, then projection. Returns (atlas, state)."""
    sel = state.mask
    t = state.t + 1
    m, v = state.m.copy(), state.v.copy()
    g = grad[sel]
    m[sel] = config.beta1 * m[sel] + (1 - config.beta1) * g
    v[sel] = config.beta2 * v[sel] + (1 - config.beta2) * g * g
    m_hat = m[sel] / (1 - config.beta1 ** t)
    v_hat = v[sel] / (1 - config.beta2 ** t)
    out = atlas.copy()
    out[sel] = project(atlas[sel] - config.lr * m_hat / (np.sqrt(v_hat) + adam_eps), original[sel], config.epsilon)
    return out, AdamState(state.mask, m, v, t)


# --------------------------------------------------------------------------- evaluation helpers


def post_attack_path(nav: ag._Navigator, episode: Episode, v_atk: int, max_steps: int = ag.MAX_STEPS):
    """Force the guide prefix, then navigate freely from v_atk."""
    prefix = guide_prefix(episode.trajectory, v_atk)
    instr = nav.instruction(episode.instruction)
    if len(prefix) > 1:
        h, _ = nav.forced(instr, prefix[:-1])
        heading = nav.world.graph.heading(prefix[-2], prefix[-1])
    else:
        h, heading = None, 0.0
    path, _ = nav.roll(instr, v_atk, h, heading, max_steps)
    return path


def checkpoint_score(params: ag.PolicyParams, world: World, instance: AttackInstance, episodes) -> float:
    """Mean nDTW to the attack trajectory, or the stop rate at v_atk for stop attacks."""
    nav = ag._Navigator(params, world)
    scores = []
    for ep in episodes:
        path = post_attack_path(nav, ep, instance.v_atk)
        if instance.mode == "stop":
            scores.append(float(len(path) == 1))
        else:
            scores.append(ndtw(path, instance.attack_trajectory, world.graph.positions))
    return float(np.mean(scores))


def select_checkpoint(checkpoints: list[AttackCheckpoint]) -> AttackCheckpoint:
    """Highest score; ties go to the earliest iteration."""
    best = checkpoints[0]
    for c in checkpoints[1:]:
        if c.score > best.score:
            best = c
    return best


def optimize_attack(instance: AttackInstance, world: World, params: ag.PolicyParams,
                    config: AttackConfig | None = None, callback=None):
    """Run the attack. Returns (attacked texels, list of AttackCheckpoint).

    ``callback(iteration, texels, loss)`` is invoked after every optimizer step.
    """
    config = config or AttackConfig(mode=instance.mode)
    config.validate()
    if not instance.val_split:
        raise AttackError("attack instance has an empty validation split")
    if not instance.train_split:
        raise AttackError("attack instance has an empty training split")
    original = world.scene.atlas.texels
    objective = AttackObjective(params, world, instance, config.steps_rendered)
    state = AdamState.fresh(world.scene.texel_mask(instance.attack_object))
    rng = np.random.default_rng(config.seed)
    texels = original.copy()
    checkpoints = []
    train = instance.train_split
    for it in range(1, config.iterations + 1):
        batch = [train[i] for i in rng.integers(0, len(train), size=config.batch_size)]
        loss, grad = objective(texels, batch)
        texels, state = adam_project_step(texels, original, grad, state, config)
        if callback is not None:
            callback(it, texels, loss)
        if it % config.checkpoint_every == 0:
            attacked = world.with_texels(texels, instance.attack_object)
            score = checkpoint_score(params, attacked, instance, instance.val_split)
            checkpoints.append(AttackCheckpoint(it, score, texels.copy()))
            logger.debug("%s it %d loss %.4f val %.3f", instance.instance_id, it, loss, score)
    return select_checkpoint(checkpoints).texels, checkpoints
