"""Small recurrent navigation policy, differentiable down to observation pixels.

The policy encodes the instruction with a GRU (mean over steps), keeps a GRU
history vector fed with the pooled panorama feature, and scores each candidate
neighbour (plus STOP) by a dot product with a fused state. All math runs in
float64 torch so gradients can be checked against finite differences.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .environment import RAW_DIM, World
from .worldgen import PAD, UNK, VOCABULARY, WorldError

logger = logging.getLogger(__name__)

STOP = -1
DEFAULT_DIM = 64
MAX_STEPS = 15
DTYPE = torch.float64


class Vocabulary:
    def __init__(self, tokens=VOCABULARY):
        self.tokens = tuple(tokens)
        if self.tokens[0] != PAD or self.tokens[1] != UNK:
            raise ValueError("vocabulary must start with PAD, UNK")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    pad_id = 0
    unk_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        return [self.index.get(str(w).lower(), self.unk_id) for w in words]


def _param_shapes(vocab_size: int, d: int) -> dict[str, tuple]:
    shapes = {"embedding": (vocab_size, d)}
    for cell in ("instr", "hist"):
        shapes.update({
            f"{cell}_w_ih": (3 * d, d), f"{cell}_w_hh": (3 * d, d),
            f"{cell}_b_ih": (3 * d,), f"{cell}_b_hh": (3 * d,),
        })
    shapes.update({
        "obs_w": (d, RAW_DIM), "obs_b": (d,), "dir_w": (d, 4),
        "fuse_w1": (d, 3 * d), "fuse_b1": (d,), "fuse_w2": (d, d), "fuse_b2": (d,),
        "stop": (d,),
    })
    return shapes


@dataclass
class PolicyParams:
    """Named float64 weight arrays. Treated as immutable once trained."""

    arrays: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.arrays["stop"].shape[0]

    @property
    def vocab_size(self) -> int:
        return self.arrays["embedding"].shape[0]

    @classmethod
    def zeros(cls, vocab_size: int = len(VOCABULARY), dim: int = DEFAULT_DIM) -> "PolicyParams":
        return cls({k: np.zeros(s) for k, s in _param_shapes(vocab_size, dim).items()})

    @classmethod
    def initialize(cls, vocab_size: int = len(VOCABULARY), dim: int = DEFAULT_DIM, seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for k, s in _param_shapes(vocab_size, dim).items():
            if k == "embedding":
                arrays[k] = rng.normal(0, 0.5, s)
            elif len(s) == 2:
                arrays[k] = rng.normal(0, 1 / math.sqrt(s[1]), s)
            elif k == "stop":
                arrays[k] = rng.normal(0, 1 / math.sqrt(dim), s)
            else:
                arrays[k] = np.zeros(s)
        return cls(arrays)

    def validate(self) -> None:
        expected = _param_shapes(self.vocab_size, self.dim)
        if set(expected) != set(self.arrays):
            raise ValueError(f"parameter names mismatch: {sorted(set(expected) ^ set(self.arrays))}")
        for k, s in expected.items():
            if self.arrays[k].shape != s:
                raise ValueError(f"{k}: shape {self.arrays[k].shape} != {s}")
            if not np.all(np.isfinite(self.arrays[k])):
                raise ValueError(f"{k}: non-finite values")

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        return {k: torch.tensor(v, dtype=DTYPE, requires_grad=requires_grad) for k, v in self.arrays.items()}

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor]) -> "PolicyParams":
        return cls({k: t.detach().numpy().copy() for k, t in tensors.items()})

    def to_bytes(self) -> tuple[dict, bytes]:
        """JSON-able shape manifest plus little-endian float64 blob, names in sorted order."""
        names = sorted(self.arrays)
        header = {"dtype": "<f8", "tensors": [{"name": k, "shape": list(self.arrays[k].shape)} for k in names]}
        blob = b"".join(np.ascontiguousarray(self.arrays[k], dtype="<f8").tobytes() for k in names)
        return header, blob

    @classmethod
    def from_bytes(cls, header: dict, blob: bytes) -> "PolicyParams":
        flat = np.frombuffer(blob, dtype="<f8")
        arrays, off = {}, 0
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arrays[entry["name"]] = flat[off:off + n].reshape(entry["shape"]).astype(np.float64)
            off += n
        if off != flat.size:
            raise ValueError("parameter blob size does not match header")
        params = cls(arrays)
        params.validate()
        return params

    def fingerprint(self) -> str:
        header, blob = self.to_bytes()
        return hashlib.sha256(json.dumps(header).encode() + blob).hexdigest()


@dataclass(frozen=True)
class Observation:
    """Per-candidate features (K, d) and pooled scene feature (d,) at one node."""

    candidates: tuple[int, ...]
    cand_feats: object
    pooled: object


@dataclass(frozen=True)
class ActionDistribution:
    actions: tuple[int, ...]  # candidate node ids in ascending order, then STOP
    probs: np.ndarray

    def argmax(self) -> int:
        return self.actions[int(np.argmax(self.probs))]


# --------------------------------------------------------------------------- torch core


def _gru(x, h, p, cell):
    gi = x @ p[f"{cell}_w_ih"].T + p[f"{cell}_b_ih"]
    gh = h @ p[f"{cell}_w_hh"].T + p[f"{cell}_b_hh"]
    ir, iz, i_n = gi.chunk(3, -1)
    hr, hz, h_n = gh.chunk(3, -1)
    r = torch.sigmoid(ir + hr)
    z = torch.sigmoid(iz + hz)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def _encode_ids(p, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """ids (B, L) padded, lengths (B,) -> (B, d) mean of GRU states over valid steps."""
    emb = p["embedding"][ids]
    b, length = ids.shape
    h = emb.new_zeros(b, emb.shape[-1])
    acc = torch.zeros_like(h)
    for t in range(length):
        valid = (t < lengths).unsqueeze(-1)
        h = torch.where(valid, _gru(emb[:, t], h, p, "instr"), h)
        acc = acc + valid * h
    return acc / lengths.unsqueeze(-1).to(acc.dtype)


def direction_encoding(rel_heading, elevation):
    rel_heading = np.asarray(rel_heading, dtype=np.float64)
    elevation = np.asarray(elevation, dtype=np.float64)
    return np.stack([np.sin(rel_heading), np.cos(rel_heading), np.sin(elevation), np.cos(elevation)], axis=-1)


def _project(p, pooled_raw, cand_raw, cand_dir):
    pooled = pooled_raw @ p["obs_w"].T + p["obs_b"]
    cand = cand_raw @ p["obs_w"].T + p["obs_b"] + cand_dir @ p["dir_w"].T
    return cand, pooled


def _step(p, instr, h, pooled, cand, cand_mask=None):
    """One decision. Returns logits (..., K+1) with STOP last, and the new history."""
    h_new = _gru(pooled, h, p, "hist")
    z = torch.tanh(torch.cat([instr, h_new, pooled], -1) @ p["fuse_w1"].T + p["fuse_b1"])
    fused = z @ p["fuse_w2"].T + p["fuse_b2"]
    logits = (cand * fused.unsqueeze(-2)).sum(-1)
    if cand_mask is not None:
        logits = logits.masked_fill(~cand_mask, -math.inf)
    stop = (fused * p["stop"]).sum(-1, keepdim=True)
    return torch.cat([logits, stop], -1), h_new


def _tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def _out(x, like_numpy: bool):
    return x.detach().numpy() if like_numpy else x


# --------------------------------------------------------------------------- public API


_VOCAB = Vocabulary()


def encode_instruction(tokens, params: PolicyParams, vocab: Vocabulary = _VOCAB) -> np.ndarray:
    """Instruction words (or ids) -> d-vector; unknown words map to UNK."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("instruction must contain at least one token")
    ids = [t if isinstance(t, (int, np.integer)) else vocab.encode([t])[0] for t in tokens]
    if min(ids) < 0 or max(ids) >= params.vocab_size:
        raise ValueError("token id out of vocabulary range")
    p = params.tensors()
    with torch.no_grad():
        enc = _encode_ids(p, torch.tensor([ids]), torch.tensor([len(ids)]))
    return enc[0].numpy()


def featurize_observation(panorama, candidate_directions, params: PolicyParams, agent_heading: float = 0.0):
    """Panorama (36, H, W, 3) + candidate (heading, elevation) list -> (cand feats, pooled).

    Accepts numpy arrays or torch tensors (for gradients); returns the same kind.
    """
    is_np = not isinstance(panorama, torch.Tensor)
    pano = _tensor(panorama)
    if pano.ndim != 4 or pano.shape[0] != 36 or pano.shape[-1] != 3 or pano.shape[1] % 4 or pano.shape[2] % 4:
        raise ValueError(f"panorama must be (36, H, W, 3) with H, W divisible by 4; got {tuple(pano.shape)}")
    from .render import nearest_view

    raw = _patch_means_t(pano)
    views = [nearest_view(h, e) for h, e in candidate_directions]
    dirs = direction_encoding([h - agent_heading for h, _ in candidate_directions],
                              [e for _, e in candidate_directions]).reshape(-1, 4)
    p = params.tensors()
    cand, pooled = _project(p, raw.mean(0), raw[views], torch.as_tensor(dirs, dtype=DTYPE))
    return _out(cand, is_np), _out(pooled, is_np)


def _patch_means_t(images: torch.Tensor) -> torch.Tensor:
    *lead, h, w, c = images.shape
    x = images.reshape(*lead, 4, h // 4, 4, w // 4, c)
    return x.mean(dim=(-4, -2)).reshape(*lead, 48)


def policy_step(instr_enc, history, obs: Observation, params: PolicyParams):
    """Returns (ActionDistribution, new history)."""
    if len(obs.candidates) < 1:
        raise ValueError("policy_step needs at least one candidate")
    p = params.tensors()
    with torch.no_grad():
        logits, h = _step(p, _tensor(instr_enc), _tensor(history), _tensor(obs.pooled), _tensor(obs.cand_feats))
        probs = torch.softmax(logits, -1)
    return ActionDistribution(tuple(obs.candidates) + (STOP,), probs.numpy()), h.numpy()


class _Navigator:
    """Greedy stepping over a World with torch params converted once."""

    def __init__(self, params: PolicyParams, world: World, vocab: Vocabulary = _VOCAB):
        self.params = params
        self.p = params.tensors()
        self.world = world
        self.vocab = vocab
        self._cand = {}

    def instruction(self, instruction) -> torch.Tensor:
        ids = self.vocab.encode(instruction) if instruction and isinstance(instruction[0], str) else list(instruction)
        if not ids:
            raise ValueError("instruction must contain at least one token")
        with torch.no_grad():
            return _encode_ids(self.p, torch.tensor([ids]), torch.tensor([len(ids)]))[0]

    def candidates(self, node):
        if node not in self._cand:
            cands = self.world.candidates(node)
            self._cand[node] = (tuple(c[0] for c in cands), [c[1] for c in cands],
                                [c[2] for c in cands], [c[3] for c in cands])
        return self._cand[node]

    def logits(self, instr, h, node, heading):
        ids, heads, elevs, views = self.candidates(node)
        raw = torch.as_tensor(self.world.raw[node], dtype=DTYPE)
        dirs = torch.as_tensor(direction_encoding(np.asarray(heads) - heading, elevs), dtype=DTYPE)
        cand, pooled = _project(self.p, raw.mean(0), raw[views], dirs)
        with torch.no_grad():
            logits, h_new = _step(self.p, instr, h, pooled, cand)
        return ids, logits, h_new

    def forced(self, instr, prefix, h=None, heading=0.0):
        if not self.world.graph.is_trajectory(prefix):
            raise WorldError(f"prefix {list(prefix)} is not a valid trajectory")
        h = torch.zeros(self.params.dim, dtype=DTYPE) if h is None else _tensor(h)
        for k, node in enumerate(prefix):
            _, _, h = self.logits(instr, h, node, heading)
            if k + 1 < len(prefix):
                heading = self.world.graph.heading(node, prefix[k + 1])
        return h, heading

    def roll(self, instr, start, h=None, heading=0.0, max_steps=MAX_STEPS):
        h = torch.zeros(self.params.dim, dtype=DTYPE) if h is None else _tensor(h)
        path = [start]
        while True:
            ids, logits, h = self.logits(instr, h, path[-1], heading)
            choice = int(np.argmax(logits.numpy()))
            if choice == len(ids) or len(path) >= max_steps:
                return tuple(path), h
            heading = self.world.graph.heading(path[-1], ids[choice])
            path.append(ids[choice])


def rollout(params: PolicyParams, world: World, instruction, start_node: int, max_steps: int = MAX_STEPS,
            history=None, heading: float = 0.0) -> tuple[int, ...]:
    """Greedy argmax navigation until STOP or ``max_steps`` nodes have been visited."""
    nav = _Navigator(params, world)
    path, _ = nav.roll(nav.instruction(instruction), start_node, history, heading, max_steps)
    return path


def forced_rollout(params: PolicyParams, world: World, instruction, prefix, history=None,
                   heading: float = 0.0) -> np.ndarray:
    """Teacher-force the policy along ``prefix``; returns the history after its last node."""
    nav = _Navigator(params, world)
    h, _ = nav.forced(nav.instruction(instruction), list(prefix), history, heading)
    return h.numpy()


# --------------------------------------------------------------------------- behaviour cloning


def _episode_steps(world: World, trajectory, initial_heading: float = 0.0):
    """Per-step (node, heading, target index) with STOP as target at the final node."""
    steps = []
    heading = initial_heading
    for t, node in enumerate(trajectory):
        ids = world.graph.neighbors(node)
        if t + 1 < len(trajectory):
            target = ids.index(trajectory[t + 1])
        else:
            target = -1
        steps.append((node, heading, target))
        if t + 1 < len(trajectory):
            heading = world.graph.heading(node, trajectory[t + 1])
    return steps


class _BCData:
    """Padded teacher-forcing tensors for a list of episodes."""

    def __init__(self, episodes, worlds: dict[str, World], vocab: Vocabulary = _VOCAB, k_max: int | None = None):
        n = len(episodes)
        t_max = max(len(e.trajectory) for e in episodes)
        l_max = max(len(e.instruction) for e in episodes)
        if k_max is None:
            k_max = max(len(worlds[e.env_id].graph.neighbors(v)) for e in episodes for v in e.trajectory)
        self.ids = np.zeros((n, l_max), dtype=np.int64)
        self.lengths = np.zeros(n, dtype=np.int64)
        self.pooled = np.zeros((n, t_max, RAW_DIM))
        self.cand = np.zeros((n, t_max, k_max, RAW_DIM))
        self.dirs = np.zeros((n, t_max, k_max, 4))
        self.cmask = np.zeros((n, t_max, k_max), dtype=bool)
        self.target = np.zeros((n, t_max), dtype=np.int64)  # padded steps: set below
        self.smask = np.zeros((n, t_max), dtype=bool)
        for i, ep in enumerate(episodes):
            world = worlds[ep.env_id]
            ids = vocab.encode(ep.instruction)
            self.ids[i, :len(ids)] = ids
            self.lengths[i] = len(ids)
            for t, (node, heading, target) in enumerate(_episode_steps(world, ep.trajectory)):
                cands = world.candidates(node)
                k = len(cands)
                raw = world.raw[node]
                self.pooled[i, t] = raw.mean(0)
                self.cand[i, t, :k] = raw[[c[3] for c in cands]]
                self.dirs[i, t, :k] = direction_encoding([c[1] - heading for c in cands], [c[2] for c in cands])
                self.cmask[i, t, :k] = True
                self.target[i, t] = k_max if target < 0 else target
                self.smask[i, t] = True
        self.target[~self.smask] = k_max  # STOP is never masked, keeps padded CE finite
        self.k_max = k_max

    def batch(self, index):
        t = lambda a: torch.as_tensor(a[index])  # noqa: E731
        return (t(self.ids), t(self.lengths), t(self.pooled), t(self.cand), t(self.dirs),
                t(self.cmask), t(self.target), t(self.smask))


def _bc_loss(p, batch, label_smoothing: float = 0.0):
    ids, lengths, pooled_raw, cand_raw, dirs, cmask, target, smask = batch
    instr = _encode_ids(p, ids, lengths)
    h = instr.new_zeros(instr.shape)
    total = instr.new_zeros(())
    for t in range(pooled_raw.shape[1]):
        cand, pooled = _project(p, pooled_raw[:, t], cand_raw[:, t], dirs[:, t])
        logits, h = _step(p, instr, h, pooled, cand, cmask[:, t])
        if label_smoothing:
            # smooth only over the valid actions of each row
            logp = torch.log_softmax(logits, -1)
            valid = torch.cat([cmask[:, t], cmask.new_ones(cmask.shape[0], 1)], -1)
            uniform = -(logp.masked_fill(~valid, 0.0)).sum(-1) / valid.sum(-1)
            nll = -logp.gather(-1, target[:, t:t + 1])[:, 0]
            ce = (1 - label_smoothing) * nll + label_smoothing * uniform
        else:
            ce = torch.nn.functional.cross_entropy(logits, target[:, t], reduction="none")
        total = total + (ce * smask[:, t]).sum()
    return total / smask.sum()


def train_bc(params_init: PolicyParams, episodes, worlds: dict[str, World], epochs: int = 60,
             lr: float = 3e-3, batch_size: int = 64, seed: int = 0, loss_history: list | None = None,
             clip_norm: float = 5.0, label_smoothing: float = 0.0) -> PolicyParams:
    """Behaviour cloning with Adam on teacher-forced next-action cross-entropy.

    The mean per-step loss of each epoch is logged and, if given, appended to
    ``loss_history`` (index 0 holds the loss before any update).
    """
    if not episodes:
        raise ValueError("train_bc needs at least one episode")
    data = _BCData(episodes, worlds)
    free = params_init.tensors(requires_grad=True)
    w0, b0 = free.pop("obs_w").detach(), free.pop("obs_b").detach()
    # The observation projection is trained in standardized input coordinates
    # and folded back, so the returned params use raw patch means directly.
    raw = np.concatenate([data.pooled[data.smask], data.cand[data.cmask]])
    mu = torch.as_tensor(raw.mean(0))
    sigma = torch.as_tensor(np.maximum(raw.std(0), 1e-3))
    dw = torch.zeros_like(w0, requires_grad=True)
    db = torch.zeros_like(b0, requires_grad=True)

    def effective():
        w = w0 + dw / sigma
        return {**free, "obs_w": w, "obs_b": b0 + db - (dw / sigma) @ mu}

    variables = list(free.values()) + [dw, db]
    opt = torch.optim.Adam(variables, lr=lr)
    rng = np.random.default_rng(seed)
    n = len(episodes)
    record = loss_history if loss_history is not None else []
    with torch.no_grad():
        record.append(float(_bc_loss(effective(), data.batch(np.arange(n)), label_smoothing)))
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = _bc_loss(effective(), data.batch(idx), label_smoothing)
            opt.zero_grad()
            loss.backward()
            if clip_norm:
                torch.nn.utils.clip_grad_norm_(variables, clip_norm)
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        record.append(total / seen)
        logger.info("bc epoch %d/%d loss %.4f", epoch + 1, epochs, total / seen)
    with torch.no_grad():
        p = effective()
    return PolicyParams.from_tensors(p)
