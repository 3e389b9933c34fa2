"""Vertical federated training on a synthetic feature-partitioned task.

Each device owns a disjoint block of every sample's features and maps its
(noisily sensed) block to a d-dimensional embedding.  The embeddings are summed
over the air, the server applies a softmax-linear head, and gradients flow back
through the chain rule using the distorted aggregate exactly as received.

Parameters are plain numpy arrays kept in a ``ModelState``; the device map is
linear (``W x``) by default, or ``W tanh(W1 x + c1)`` with ``hidden > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aircomp import aggregate
from .convergence import ConvergenceConstants
from .model import AllocationPlan, ChannelState, SystemConfig, make_rng, sensed_sample


@dataclass
class SyntheticTask:
    num_classes: int
    feature_dims: tuple
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    embedding_dim: int = 100
    seed: int = 0
    class_means: np.ndarray | None = None  # (C, sum m_k); needed for fresh draws

    def __post_init__(self):
        if any(m < 1 for m in self.feature_dims):
            raise ValueError("every device needs at least one feature")
        if self.X_train.shape[1] != sum(self.feature_dims):
            raise ValueError("feature blocks do not cover the sample width")
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError("labels out of range")

    @property
    def K(self) -> int:
        return len(self.feature_dims)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.feature_dims)])

    def block(self, X: np.ndarray, k: int) -> np.ndarray:
        o = self.offsets
        return X[..., o[k]:o[k + 1]]

    @property
    def num_train(self) -> int:
        return self.X_train.shape[0]

    def fresh_samples(self, n: int, rng: np.random.Generator):
        """``n`` new i.i.d. draws from the task distribution (uniform class prior)."""
        if self.class_means is None:
            raise ValueError("task has no class means; fresh draws need a generated task")
        y = rng.integers(0, self.num_classes, n)
        return self.class_means[y] + rng.standard_normal((n, self.class_means.shape[1])), y


def make_task(K: int = 3, m_k: int | Sequence[int] = 10, d: int = 100, num_classes: int = 7,
              N: int = 2100, seed: int = 0, separation: float = 1.0, test_fraction: float = 0.2) -> SyntheticTask:
    """Class-conditional Gaussians over the full feature space, split into K blocks.

    Every class has an equal share of the N samples, unit isotropic covariance
    and a mean drawn from N(0, separation^2 I), so the Bayes classifier is
    linear.  A stratified ``test_fraction`` is held out.
    """
    dims = (int(m_k),) * K if np.isscalar(m_k) else tuple(int(m) for m in m_k)
    if len(dims) != K:
        raise ValueError(f"need {K} feature dimensions, got {len(dims)}")
    if K < 1 or any(m < 1 for m in dims) or d < 1 or num_classes < 2 or N < num_classes:
        raise ValueError("make_task needs K, m_k, d >= 1, num_classes >= 2 and N >= num_classes")
    rng = make_rng(seed, "data")
    n_feat = sum(dims)
    means = rng.standard_normal((num_classes, n_feat)) * separation
    per_class = N // num_classes
    y = np.repeat(np.arange(num_classes), per_class)
    X = means[y] + rng.standard_normal((y.size, n_feat))
    train_idx, test_idx = [], []
    n_test = int(round(per_class * test_fraction))
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    return SyntheticTask(num_classes, dims, X[tr], y[tr], X[te], y[te], d, seed, means)


@dataclass
class ModelState:
    server_W: np.ndarray  # (C, d)
    server_b: np.ndarray  # (C,)
    device_W: list  # (d, m_k) or (d, hidden)
    device_hidden: list | None = None  # [(W1 (hidden, m_k), c1 (hidden,))] for the tanh variant

    def copy(self) -> "ModelState":
        hid = None if self.device_hidden is None else [(a.copy(), c.copy()) for a, c in self.device_hidden]
        return ModelState(self.server_W.copy(), self.server_b.copy(), [w.copy() for w in self.device_W], hid)

    def blocks(self) -> dict:
        """Named parameter arrays (views, so in-place edits reach the model)."""
        out = {"server_W": self.server_W, "server_b": self.server_b}
        for k, w in enumerate(self.device_W):
            out[f"device{k}_W"] = w
        if self.device_hidden is not None:
            for k, (a, c) in enumerate(self.device_hidden):
                out[f"device{k}_W1"] = a
                out[f"device{k}_c1"] = c
        return out


def init_model(task: SyntheticTask, seed: int = 0, hidden: int = 0, server_scale: float = 0.01) -> ModelState:
    rng = make_rng(seed, "init")
    d, C = task.embedding_dim, task.num_classes
    dev, hid = [], None
    if hidden:
        hid = []
        for m in task.feature_dims:
            hid.append((rng.standard_normal((hidden, m)) / math.sqrt(m), np.zeros(hidden)))
            dev.append(rng.standard_normal((d, hidden)) / math.sqrt(hidden))
    else:
        dev = [rng.standard_normal((d, m)) / math.sqrt(m) for m in task.feature_dims]
    server = rng.standard_normal((C, d)) * server_scale / math.sqrt(d)
    return ModelState(server, np.zeros(C), dev, hid)


@dataclass
class TrainingState:
    model: ModelState
    round: int = 0
    loss_history: list = field(default_factory=list)
    batch_loss_history: list = field(default_factory=list)
    accuracy_history: list = field(default_factory=list)  # (round, accuracy)
    rngs: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else math.nan

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_history[-1][1] if self.accuracy_history else math.nan


def make_rngs(seed: int) -> dict:
    return {s: make_rng(seed, s) for s in ("batch", "sensing", "aircomp")}


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _embed(model: ModelState, k: int, x: np.ndarray):
    if model.device_hidden is None:
        return x @ model.device_W[k].T, None
    W1, c1 = model.device_hidden[k]
    a = np.tanh(x @ W1.T + c1)
    return a @ model.device_W[k].T, a


def _softmax_ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = float(-np.mean(logp[np.arange(y.size), y]))
    return loss, probs


SAMPLING_MODES = ("cycled", "fresh")


def _batch_indices(n_pool: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """Without replacement within a round; larger batches cycle through fresh permutations."""
    reps = -(-b // n_pool)
    if reps == 1:
        return rng.choice(n_pool, b, replace=False)
    return np.concatenate([rng.permutation(n_pool) for _ in range(reps)])[:b]


def forward_round(state: TrainingState, task: SyntheticTask, plan: AllocationPlan, t: int,
                  channel: ChannelState, config: SystemConfig, rngs: dict | None = None, *,
                  batch_idx=None, sampling: str = "cycled"):
    """One distorted forward pass; returns (mean batch loss, cache for ``backward_round``).

    ``sampling="cycled"`` re-observes stored training scenes (fresh sensing
    noise each time); ``"fresh"`` draws new scenes from the task distribution.
    """
    rngs = rngs if rngs is not None else state.rngs
    model = state.model
    b = int(plan.batch_size[t])
    if b < 1:
        raise ValueError("batch size must be >= 1")
    if sampling not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {sampling!r}; expected one of {SAMPLING_MODES}")
    if batch_idx is not None:
        idx = np.asarray(batch_idx)
        X_batch, y = task.X_train[idx], task.y_train[idx]
    elif sampling == "fresh":
        idx = None
        X_batch, y = task.fresh_samples(b, rngs["batch"])
    else:
        idx = _batch_indices(task.num_train, b, rngs["batch"])
        X_batch, y = task.X_train[idx], task.y_train[idx]
    net = config.network
    h = channel.column(t)
    p = plan.tx_power[:, t]
    eta = float(plan.denoise[t])
    xs, acts, embs = [], [], []
    for k, dev in enumerate(config.devices):
        clean = task.block(X_batch, k)
        ps = float(plan.sense_power[k, t])
        # a device that does not transmit this round senses nothing useful;
        # its block never reaches the server, so any positive power will do
        x = sensed_sample(clean, dev, net, ps if ps > 0 else dev.max_power_watts, rngs["sensing"])
        e, a = _embed(model, k, x)
        xs.append(x)
        acts.append(a)
        embs.append(e)
    agg = aggregate(embs, h, p, eta, net.channel_noise_variance, rngs["aircomp"])
    logits = agg @ model.server_W.T + model.server_b
    loss, probs = _softmax_ce(logits, y)
    gains = h * np.sqrt(p) / math.sqrt(eta)
    cache = {"idx": idx, "x": xs, "act": acts, "emb": embs, "agg": agg, "probs": probs, "y": y, "gains": gains}
    return loss, cache


def backward_round(cache: dict, state: TrainingState) -> dict:
    """Gradients of the mean batch loss for every parameter block (same keys as ``ModelState.blocks``)."""
    model = state.model
    y = cache["y"]
    b = y.size
    g_logits = cache["probs"].copy()
    g_logits[np.arange(b), y] -= 1.0
    g_logits /= b
    grads = {"server_W": g_logits.T @ cache["agg"], "server_b": g_logits.sum(axis=0)}
    # gradient w.r.t. the received aggregate, sent back to every device
    g_agg = g_logits @ model.server_W
    for k, gain in enumerate(cache["gains"]):
        g_emb = gain * g_agg
        x = cache["x"][k]
        if model.device_hidden is None:
            grads[f"device{k}_W"] = g_emb.T @ x
        else:
            a = cache["act"][k]
            W1, _ = model.device_hidden[k]
            grads[f"device{k}_W"] = g_emb.T @ a
            g_pre = (g_emb @ model.device_W[k]) * (1.0 - a * a)
            grads[f"device{k}_W1"] = g_pre.T @ x
            grads[f"device{k}_c1"] = g_pre.sum(axis=0)
    return grads


def clean_logits(model: ModelState, task: SyntheticTask, X: np.ndarray) -> np.ndarray:
    """Noise-free inference: embeddings summed exactly."""
    if model.device_hidden is None:
        # linear maps compose, which avoids forming the (N, d) embeddings
        out = np.zeros((X.shape[0], model.server_W.shape[0]))
        for k in range(task.K):
            out += task.block(X, k) @ (model.server_W @ model.device_W[k]).T
        return out + model.server_b
    agg = sum(_embed(model, k, task.block(X, k))[0] for k in range(task.K))
    return agg @ model.server_W.T + model.server_b


def clean_loss(model: ModelState, task: SyntheticTask, X=None, y=None) -> float:
    X = task.X_train if X is None else X
    y = task.y_train if y is None else y
    return _softmax_ce(clean_logits(model, task, X), y)[0]


def accuracy(model: ModelState, task: SyntheticTask) -> float:
    return float(np.mean(clean_logits(model, task, task.X_test).argmax(axis=1) == task.y_test))


def train(config: SystemConfig, plan: AllocationPlan, task: SyntheticTask, channel: ChannelState,
          rounds: int | None = None, mu: float = 0.1, seed: int = 0, model: ModelState | None = None,
          hidden: int = 0, eval_every: int = 10, sampling: str = "cycled") -> TrainingState:
    """Run ``rounds`` rounds of distorted forward / backward / gradient step.

    ``loss_history`` holds the clean full-training-set loss after every round,
    ``batch_loss_history`` the distorted mini-batch loss, and test accuracy is
    recorded every ``eval_every`` rounds (and after the last one).  ``sampling``
    picks how batches are sensed (see ``forward_round``).
    """
    T = plan.shape[1] if rounds is None else int(rounds)
    if T > plan.shape[1]:
        raise ValueError(f"plan covers {plan.shape[1]} rounds, {T} requested")
    if task.K != config.K:
        raise ValueError("task and config disagree on the number of devices")
    model = model.copy() if model is not None else init_model(task, seed, hidden)
    state = TrainingState(model, rngs=make_rngs(seed))
    params = model.blocks()
    for t in range(T):
        loss, cache = forward_round(state, task, plan, t, channel, config, sampling=sampling)
        grads = backward_round(cache, state)
        if mu:
            for name, g in grads.items():
                params[name] -= mu * g
        full = clean_loss(model, task)
        if not (math.isfinite(loss) and math.isfinite(full)):
            raise FloatingPointError(f"training diverged at round {t}: batch loss {loss}, full loss {full}")
        state.batch_loss_history.append(loss)
        state.loss_history.append(full)
        state.round = t + 1
        if (t + 1) % eval_every == 0 or t + 1 == T:
            state.accuracy_history.append((t + 1, accuracy(model, task)))
    return state


# ---------------------------------------------------------------------------
# constants of the convergence analysis
# ---------------------------------------------------------------------------


def _flat_grad(model: ModelState, task: SyntheticTask, X, y) -> np.ndarray:
    """Gradient of the clean (monolithic) mean loss, flattened over all blocks."""
    state = TrainingState(model)
    embs, acts = [], []
    for k in range(task.K):
        e, a = _embed(model, k, task.block(X, k))
        embs.append(e)
        acts.append(a)
    agg = sum(embs)
    _, probs = _softmax_ce(agg @ model.server_W.T + model.server_b, y)
    cache = {"y": y, "probs": probs, "agg": agg, "x": [task.block(X, k) for k in range(task.K)],
             "act": acts, "gains": np.ones(task.K)}
    g = backward_round(cache, state)
    return np.concatenate([g[n].ravel() for n in model.blocks()])


def _set_flat(model: ModelState, vec: np.ndarray):
    i = 0
    for arr in model.blocks().values():
        arr[...] = vec[i:i + arr.size].reshape(arr.shape)
        i += arr.size


def _get_flat(model: ModelState) -> np.ndarray:
    return np.concatenate([a.ravel() for a in model.blocks().values()])


def estimate_constants(task: SyntheticTask, state: TrainingState | ModelState, samples: int = 500,
                       mu: float = 0.1, num_rounds: int = 200, seed: int = 0,
                       power_iters: int = 30) -> ConvergenceConstants:
    """Empirical values of the analysis constants at the current parameters.

    G2: largest embedding-input Jacobian Frobenius norm (``max_k ||W_k||_F`` for
    linear maps); G1: largest embedding-parameter Jacobian norm (``sqrt(d) ||x||``
    for linear maps); Psi: largest spectral norm of the loss Hessian in the
    embedding; sigma^2: mean squared deviation of per-sample gradients; L: top
    eigenvalue of the loss Hessian by power iteration on finite-difference
    Hessian-vector products.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    model = state.model if isinstance(state, TrainingState) else state
    rng = make_rng(seed, "batch")
    n = min(samples, task.num_train)
    idx = rng.choice(task.num_train, n, replace=False)
    X, y = task.X_train[idx], task.y_train[idx]
    d = task.embedding_dim

    # G2 and G1
    g2 = 0.0
    g1 = 0.0
    for k in range(task.K):
        xk = task.block(X, k)
        if model.device_hidden is None:
            g2 = max(g2, float(np.linalg.norm(model.device_W[k])))
            g1 = max(g1, float(math.sqrt(d) * np.max(np.linalg.norm(xk, axis=1))))
        else:
            W1, c1 = model.device_hidden[k]
            W = model.device_W[k]
            a = np.tanh(xk @ W1.T + c1)
            s = 1.0 - a * a
            for i in range(n):
                J_in = (W * s[i]) @ W1
                g2 = max(g2, float(np.linalg.norm(J_in)))
                # Jacobian w.r.t. (W, W1, c1)
                jw = math.sqrt(d) * np.linalg.norm(a[i])
                jw1 = np.linalg.norm(W * s[i]) * math.sqrt(1.0 + xk[i] @ xk[i])
                g1 = max(g1, float(math.hypot(jw, jw1)))

    # Psi: Hessian of the sample loss in the aggregate embedding, theta0^T (diag(s) - s s^T) theta0
    logits = clean_logits(model, task, X)
    _, probs = _softmax_ce(logits, y)
    psi = 0.0
    W0 = model.server_W
    for i in range(n):
        s = probs[i]
        H = W0.T @ (np.diag(s) - np.outer(s, s)) @ W0
        psi = max(psi, float(np.linalg.norm(H, 2)))

    # sigma^2
    full = _flat_grad(model, task, X, y)
    dev = 0.0
    for i in range(n):
        gi = _flat_grad(model, task, X[i:i + 1], y[i:i + 1])
        dev += float(np.sum((gi - full) ** 2))
    sigma2 = dev / n

    # L by power iteration
    base = _get_flat(model)
    work = model.copy()
    v = make_rng(seed, "init").standard_normal(base.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    eps = 1e-5 * max(1.0, float(np.linalg.norm(base)))
    for _ in range(power_iters):
        _set_flat(work, base + eps * v)
        gp = _flat_grad(work, task, X, y)
        _set_flat(work, base - eps * v)
        gm = _flat_grad(work, task, X, y)
        hv = (gp - gm) / (2 * eps)
        lam = float(np.linalg.norm(hv))
        if lam == 0:
            break
        v = hv / lam
    L = max(lam, 1e-12)
    return ConvergenceConstants(lipschitz_L=L, learning_rate_mu=mu, grad_variance_sigma2=sigma2,
                                embed_param_grad_G1=g1, embed_input_grad_G2=g2, hessian_bound_Psi=psi,
                                num_devices_K=task.K, num_rounds_T=num_rounds)
