"""scikit-learn style wrappers around the policy and the texture attack.

Samples are ``(World, Episode)`` pairs for the policy and a single
``(World, AttackInstance)`` pair for the attack, since both need the
environment alongside the data.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import agent as ag
from .attack import AttackConfig, AttackInstance, optimize_attack
from .environment import World
from .metrics import ndtw, success
from .worldgen import Episode


def check_navigation_samples(X) -> list[tuple[World, Episode]]:
    """Validate a sequence of (World, Episode) pairs whose env ids agree."""
    samples = list(X)
    if not samples:
        raise ValueError("expected at least one (World, Episode) sample")
    for k, item in enumerate(samples):
        if not (isinstance(item, tuple) and len(item) == 2):
            raise ValueError(f"sample {k} is not a (World, Episode) pair")
        world, ep = item
        if not isinstance(world, World) or not isinstance(ep, Episode):
            raise ValueError(f"sample {k} is not a (World, Episode) pair")
        if world.env_id != ep.env_id:
            raise ValueError(f"sample {k}: episode env {ep.env_id!r} does not match world {world.env_id!r}")
        if not world.graph.is_trajectory(ep.trajectory):
            raise ValueError(f"sample {k}: trajectory is not a path in the world graph")
    return samples


def check_texels(texels) -> np.ndarray:
    t = np.asarray(texels, dtype=np.float64)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"texels must have shape (H, W, 3); got {t.shape}")
    if not np.all(np.isfinite(t)) or t.min() < 0 or t.max() > 1:
        raise ValueError("texels must be finite and lie in [0, 1]")
    return t


class NavigationPolicy(BaseEstimator):
    """Behaviour-cloned instruction follower; ``predict`` returns greedy rollouts."""

    def __init__(self, dim: int = ag.DEFAULT_DIM, epochs: int = 60, lr: float = 3e-3, batch_size: int = 64,
                 label_smoothing: float = 0.1, max_steps: int = ag.MAX_STEPS, random_state: int = 0):
        self.dim = dim
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.max_steps = max_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        samples = check_navigation_samples(X)
        worlds = {w.env_id: w for w, _ in samples}
        self.loss_history_ = []
        init = ag.PolicyParams.initialize(dim=self.dim, seed=self.random_state)
        self.params_ = ag.train_bc(init, [e for _, e in samples], worlds, epochs=self.epochs, lr=self.lr,
                                   batch_size=self.batch_size, seed=self.random_state,
                                   loss_history=self.loss_history_, label_smoothing=self.label_smoothing)
        return self

    def predict(self, X) -> list[tuple[int, ...]]:
        check_is_fitted(self, "params_")
        return [ag.rollout(self.params_, w, e.instruction, e.trajectory[0], self.max_steps)
                for w, e in check_navigation_samples(X)]

    def score(self, X, y=None) -> float:
        """Success rate (fraction of rollouts ending within 3 m of the goal)."""
        samples = check_navigation_samples(X)
        paths = self.predict(samples)
        return float(np.mean([success(p, e.trajectory, w.graph.positions) for p, (w, e) in zip(paths, samples)]))

    def ndtw_score(self, X) -> float:
        samples = check_navigation_samples(X)
        paths = self.predict(samples)
        return float(np.mean([ndtw(p, e.trajectory, w.graph.positions) for p, (w, e) in zip(paths, samples)]))


class TextureAttack(BaseEstimator, TransformerMixin):
    """Optimizes one attack object's texture against frozen ``policy_params``.

    ``fit((world, instance))`` learns ``texels_``; ``transform(world)`` returns the
    same world observed through the attacked atlas.
    """

    def __init__(self, policy_params: ag.PolicyParams | None = None, epsilon: float = 0.3, lr: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, iterations: int = 300, batch_size: int = 16,
                 checkpoint_every: int = 30, steps_rendered: int = 3, random_state: int = 0):
        self.policy_params = policy_params
        self.epsilon = epsilon
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.iterations = iterations
        self.batch_size = batch_size
        self.checkpoint_every = checkpoint_every
        self.steps_rendered = steps_rendered
        self.random_state = random_state

    def _config(self, mode: str) -> AttackConfig:
        cfg = AttackConfig(epsilon=self.epsilon, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           iterations=self.iterations, batch_size=self.batch_size,
                           checkpoint_every=self.checkpoint_every, steps_rendered=self.steps_rendered,
                           mode=mode, seed=self.random_state)
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        if not (isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], World)
                and isinstance(X[1], AttackInstance)):
            raise ValueError("expected a (World, AttackInstance) pair")
        if self.policy_params is None:
            raise ValueError("policy_params must be set before fitting")
        world, inst = X
        if world.env_id != inst.env_id:
            raise ValueError("attack instance belongs to a different world")
        texels, log = optimize_attack(inst, world, self.policy_params, self._config(inst.mode))
        self.texels_ = texels
        self.checkpoints_ = log
        self.object_id_ = inst.attack_object
        self.env_id_ = inst.env_id
        return self

    def transform(self, X):
        check_is_fitted(self, "texels_")
        if not isinstance(X, World):
            raise ValueError("transform expects a World")
        if X.env_id != self.env_id_:
            raise ValueError("world does not match the fitted attack")
        return X.with_texels(check_texels(self.texels_), self.object_id_)
