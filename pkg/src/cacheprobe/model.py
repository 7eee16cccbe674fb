"""LSTM + attention eviction model trained to imitate Belady.

Architecture, per eviction decision:

* every access in the history window is encoded as ``[e(pc); e(line)]`` and
  fed through a single-layer LSTM (fresh zero state at the window start);
* every resident line of the victim set is embedded with the same address
  table and projected to an attention key;
* the key attends over the window's hidden states (projected to queries and
  values), scaled by ``1/sqrt(d_h)``;
* a dense layer maps ``[attention output; key]`` to a scalar score. The
  highest-scoring line is evicted.

Everything is float64 numpy with hand-written backpropagation so gradients
can be verified against finite differences.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .cachesim import BeladyPolicy, CacheConfig, EvictionPolicy, simulate
from .trace import Trace

OOV = 0
PARAM_NAMES = ("pc_emb", "addr_emb", "lstm_w", "lstm_b", "w_query", "w_key",
               "w_value", "score_w")
_MAGIC = b"CPRBMDL1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_e: int = 32
    d_h: int = 64
    window: int = 32
    optimizer: str = "adam"  # or "sgd" (with momentum)
    lr: float = 3e-3
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d_e", "d_h", "window", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.lr <= 0 or self.clip_norm <= 0 or not 0 <= self.momentum < 1:
            raise ModelError("lr and clip_norm must be positive, momentum in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ModelError(f"unknown optimizer {self.optimizer!r}")


class RecurrentState(NamedTuple):
    hidden: np.ndarray
    cell: np.ndarray


class EvictionScores(NamedTuple):
    lines: list[int]
    scores: np.ndarray
    probs: np.ndarray

    @property
    def victim(self) -> int:
        return self.lines[int(np.argmax(self.scores))]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, mask, axis):
    x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Batch:
    """Padded decision batch.

    ``pcs``/``lines`` hold vocabulary ids for the history window (left padded,
    ``tmask`` marks real steps); ``cands`` holds vocabulary ids of the resident
    lines (``cmask`` marks real entries); ``labels`` are positions in ``cands``.
    """

    pcs: np.ndarray
    lines: np.ndarray
    tmask: np.ndarray
    cands: np.ndarray
    cmask: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.pcs)

    def take(self, idx) -> "Batch":
        return Batch(self.pcs[idx], self.lines[idx], self.tmask[idx], self.cands[idx],
                     self.cmask[idx], None if self.labels is None else self.labels[idx])


@dataclass
class CachingModel:
    config: ModelConfig
    pc_vocab: dict[int, int]
    line_vocab: dict[int, int]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, pcs, lines) -> "CachingModel":
        """Fresh model with vocabularies built from the given pc/line ids."""
        pc_vocab = {int(p): i + 1 for i, p in enumerate(sorted(set(np.asarray(pcs).tolist())))}
        line_vocab = {int(l): i + 1 for i, l in enumerate(sorted(set(np.asarray(lines).tolist())))}
        rng = np.random.default_rng(config.seed)
        de, dh = config.d_e, config.d_h
        lstm_scale = 1.0 / np.sqrt(dh)
        lstm_b = np.zeros(4 * dh)
        lstm_b[dh:2 * dh] = 1.0  # forget gate
        params = {
            "pc_emb": rng.normal(0.0, 0.5, (len(pc_vocab) + 1, de)),
            "addr_emb": rng.normal(0.0, 0.5, (len(line_vocab) + 1, de)),
            "lstm_w": rng.uniform(-lstm_scale, lstm_scale, (2 * de + dh, 4 * dh)),
            "lstm_b": lstm_b,
            "w_query": rng.normal(0.0, 1.0 / np.sqrt(dh), (dh, dh)),
            "w_key": rng.normal(0.0, 1.0 / np.sqrt(de), (de, dh)),
            "w_value": rng.normal(0.0, 1.0 / np.sqrt(dh), (dh, dh)),
            # Near-zero scorer so the initial eviction distribution is ~uniform.
            # No bias: a shared offset cancels in the softmax.
            "score_w": rng.normal(0.0, 1e-3, 2 * dh),
        }
        return cls(config, pc_vocab, line_vocab, params)

    # vocabulary ----------------------------------------------------------

    def pc_ids(self, pcs) -> np.ndarray:
        return np.array([self.pc_vocab.get(int(p), OOV) for p in np.ravel(pcs)],
                        dtype=np.int64).reshape(np.shape(pcs))

    def line_ids(self, lines) -> np.ndarray:
        return np.array([self.line_vocab.get(int(l), OOV) for l in np.ravel(lines)],
                        dtype=np.int64).reshape(np.shape(lines))

    def make_batch(self, trace: Trace, indices, candidates, labels=None) -> Batch:
        """Batch of decisions at trace positions ``indices``.

        The window for index ``i`` covers accesses ``i - window + 1 .. i``.
        ``candidates`` is a list of resident-line lists; ``labels`` (optional)
        the victim line of each decision.
        """
        T = self.config.window
        pcs_all = self.pc_ids(trace.pcs)
        lines_all = self.line_ids(trace.lines())
        n = len(indices)
        C = max(len(c) for c in candidates)
        pcs = np.zeros((n, T), dtype=np.int64)
        lines = np.zeros((n, T), dtype=np.int64)
        tmask = np.zeros((n, T), dtype=bool)
        cands = np.zeros((n, C), dtype=np.int64)
        cmask = np.zeros((n, C), dtype=bool)
        lab = np.zeros(n, dtype=np.int64) if labels is not None else None
        for b, (i, cand) in enumerate(zip(indices, candidates)):
            lo = max(0, i - T + 1)
            k = i + 1 - lo
            pcs[b, T - k:] = pcs_all[lo:i + 1]
            lines[b, T - k:] = lines_all[lo:i + 1]
            tmask[b, T - k:] = True
            cands[b, :len(cand)] = self.line_ids(cand)
            cmask[b, :len(cand)] = True
            if labels is not None:
                lab[b] = list(cand).index(labels[b])
        return Batch(pcs, lines, tmask, cands, cmask, lab)

    # forward / backward --------------------------------------------------

    def _forward(self, batch: Batch):
        p = self.params
        dh = self.config.d_h
        B, T = batch.pcs.shape
        X = np.concatenate([p["pc_emb"][batch.pcs], p["addr_emb"][batch.lines]], axis=-1)
        h = np.zeros((B, dh))
        c = np.zeros((B, dh))
        H = np.zeros((B, T, dh))
        Cs = np.zeros((B, T, dh))
        steps = []
        for t in range(T):
            m = batch.tmask[:, t, None]
            xh = np.concatenate([X[:, t], h], axis=1)
            z = xh @ p["lstm_w"] + p["lstm_b"]
            i = _sigmoid(z[:, :dh])
            f = _sigmoid(z[:, dh:2 * dh])
            g = np.tanh(z[:, 2 * dh:3 * dh])
            o = _sigmoid(z[:, 3 * dh:])
            c_raw = f * c + i * g
            tc = np.tanh(c_raw)
            steps.append((xh, c, i, f, g, o, tc))
            c = np.where(m, c_raw, 0.0)
            h = np.where(m, o * tc, 0.0)
            H[:, t] = h
            Cs[:, t] = c

        Q = H @ p["w_query"]
        V = H @ p["w_value"]
        Ek = p["addr_emb"][batch.cands]
        K = Ek @ p["w_key"]
        scale = 1.0 / np.sqrt(dh)
        A = np.einsum("bcd,btd->bct", K, Q) * scale
        alpha = _softmax(A, batch.tmask[:, None, :], axis=2)
        O = alpha @ V
        F = np.concatenate([O, K], axis=-1)
        S = F @ p["score_w"]
        S = np.where(batch.cmask, S, 0.0)
        P = _softmax(S, batch.cmask, axis=1)
        cache = dict(X=X, H=H, Cs=Cs, steps=steps, Q=Q, V=V, Ek=Ek, K=K, alpha=alpha,
                     O=O, F=F, scale=scale)
        return S, P, cache

    def loss_and_grads(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy against ``batch.labels`` and its gradients."""
        p = self.params
        dh, de = self.config.d_h, self.config.d_e
        S, P, k = self._forward(batch)
        B = len(batch)
        rows = np.arange(B)
        loss = float(-np.log(P[rows, batch.labels]).mean())

        g = {name: np.zeros_like(v) for name, v in p.items()}
        dS = P.copy()
        dS[rows, batch.labels] -= 1.0
        dS /= B
        dS = np.where(batch.cmask, dS, 0.0)
        g["score_w"] = np.einsum("bc,bcf->f", dS, k["F"])
        dF = dS[..., None] * p["score_w"]
        dO, dK = dF[..., :dh], dF[..., dh:].copy()

        alpha = k["alpha"]
        dalpha = dO @ k["V"].transpose(0, 2, 1)
        dV = alpha.transpose(0, 2, 1) @ dO
        dA = alpha * (dalpha - (dalpha * alpha).sum(axis=2, keepdims=True))
        dA *= k["scale"]
        dK += dA @ k["Q"]
        dQ = dA.transpose(0, 2, 1) @ k["K"]

        g["w_key"] = np.einsum("bce,bcd->ed", k["Ek"], dK)
        dEk = dK @ p["w_key"].T
        np.add.at(g["addr_emb"], batch.cands, dEk * batch.cmask[..., None])

        H = k["H"]
        g["w_query"] = np.einsum("bth,btd->hd", H, dQ)
        g["w_value"] = np.einsum("bth,btd->hd", H, dV)
        dH = dQ @ p["w_query"].T + dV @ p["w_value"].T

        W = p["lstm_w"]
        T = H.shape[1]
        dX = np.zeros_like(k["X"])
        dh_next = np.zeros((B, dh))
        dc_next = np.zeros((B, dh))
        for t in range(T - 1, -1, -1):
            xh, c_prev, i, f, gg, o, tc = k["steps"][t]
            m = batch.tmask[:, t, None]
            dh_t = np.where(m, dH[:, t] + dh_next, 0.0)
            dc = np.where(m, dc_next, 0.0) + dh_t * o * (1.0 - tc * tc)
            do = dh_t * tc
            di = dc * gg
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                                 dg * (1 - gg * gg), do * o * (1 - o)], axis=1)
            g["lstm_w"] += xh.T @ dz
            g["lstm_b"] += dz.sum(axis=0)
            dxh = dz @ W.T
            dX[:, t] = dxh[:, :2 * de]
            dh_next = dxh[:, 2 * de:]
            dc_next = dc * f
        np.add.at(g["pc_emb"], batch.pcs, dX[..., :de])
        np.add.at(g["addr_emb"], batch.lines, dX[..., de:])
        return loss, g

    def loss(self, batch: Batch) -> float:
        _, P, _ = self._forward(batch)
        return float(-np.log(P[np.arange(len(batch)), batch.labels]).mean())

    def predict(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Scores and softmax probabilities, ``(B, C)``; padded entries score 0, prob 0."""
        S, P, _ = self._forward(batch)
        return S, P

    def hidden_states(self, batch: Batch) -> np.ndarray:
        """Hidden-state trajectories ``(B, T, d_h)`` (zeros on padded steps)."""
        _, _, cache = self._forward(batch)
        return cache["H"]


def forward(model: CachingModel, pcs, lines, resident) -> tuple[EvictionScores, list[RecurrentState]]:
    """Score the resident lines given a history window of (pc, line) pairs.

    The last element of the window is the current access. Returns the
    scores/softmax over ``resident`` and the LSTM state after every step.
    """
    pcs = np.asarray(pcs)
    lines = np.asarray(lines)
    if len(pcs) == 0 or len(pcs) != len(lines):
        raise ModelError("history window must be non-empty, pcs and lines equally long")
    if len(resident) == 0:
        raise ModelError("need at least one resident line")
    T = len(pcs)
    batch = Batch(model.pc_ids(pcs)[None], model.line_ids(lines)[None],
                  np.ones((1, T), dtype=bool), model.line_ids(list(resident))[None],
                  np.ones((1, len(resident)), dtype=bool))
    inner = CachingModel(ModelConfig(**{**asdict(model.config), "window": T}),
                         model.pc_vocab, model.line_vocab, model.params)
    S, P, cache = inner._forward(batch)
    states = [RecurrentState(cache["H"][0, t].copy(), cache["Cs"][0, t].copy())
              for t in range(T)]
    return EvictionScores(list(resident), S[0], P[0]), states


# imitation learning -----------------------------------------------------

class _Recorder(EvictionPolicy):
    """Wraps a policy and logs every eviction decision it makes."""

    def __init__(self, inner: EvictionPolicy):
        self.inner = inner
        self.name = inner.name
        self.decisions: list[tuple[int, list[int], int]] = []

    def reset(self, trace, config):
        self.decisions = []
        self.inner.reset(trace, config)

    def on_access(self, index, line, hit):
        self.inner.on_access(index, line, hit)

    def victim(self, index, candidates):
        v = self.inner.victim(index, candidates)
        self.decisions.append((index, list(candidates), v))
        return v


def belady_decisions(trace: Trace, cache: CacheConfig) -> list[tuple[int, list[int], int]]:
    rec = _Recorder(BeladyPolicy(trace))
    simulate(trace, cache, rec)
    return rec.decisions


@dataclass
class TrainingCurve:
    step_loss: list[float]
    epoch_loss: list[float]
    epoch_accuracy: list[float]
    initial_loss: float
    decisions: int


def train_imitation(trace: Trace, cache: CacheConfig,
                    config: ModelConfig | None = None) -> tuple[CachingModel, TrainingCurve]:
    """Behavioral cloning of Belady's eviction decisions on ``trace``.

    Minimizes the cross-entropy between the model's eviction distribution and
    Belady's victim with minibatch Adam (or SGD with momentum); gradients are
    clipped to ``clip_norm`` in global L2 norm first.
    """
    config = config or ModelConfig()
    decisions = belady_decisions(trace, cache)
    if not decisions:
        raise ModelError("trace produces no eviction decisions under this cache "
                         "(working set fits); nothing to imitate")
    model = CachingModel.initialize(config, trace.pcs, trace.lines())
    idx = [d[0] for d in decisions]
    data = model.make_batch(trace, idx, [d[1] for d in decisions], [d[2] for d in decisions])
    rng = np.random.default_rng(config.seed + 1)
    step = _Optimizer(config, model.params)
    initial = model.loss(data)
    step_loss, epoch_loss, epoch_acc = [], [], []
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            batch = data.take(order[s:s + config.batch_size])
            loss, grads = model.loss_and_grads(batch)
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            clip = min(1.0, config.clip_norm / (norm + 1e-12))
            step(grads, clip)
            step_loss.append(loss)
        loss, acc = _evaluate(model, data)
        epoch_loss.append(loss)
        epoch_acc.append(acc)
    return model, TrainingCurve(step_loss, epoch_loss, epoch_acc, initial, n)


class _Optimizer:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def __call__(self, grads: dict[str, np.ndarray], scale: float) -> None:
        cfg = self.config
        self.t += 1
        for k, g in grads.items():
            g = g * scale
            if cfg.optimizer == "sgd":
                self.m[k] = cfg.momentum * self.m[k] - cfg.lr * g
                self.params[k] += self.m[k]
                continue
            self.m[k] = 0.9 * self.m[k] + 0.1 * g
            self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
            m_hat = self.m[k] / (1 - 0.9 ** self.t)
            v_hat = self.v[k] / (1 - 0.999 ** self.t)
            self.params[k] -= cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def _evaluate(model: CachingModel, data: Batch, chunk: int = 1024) -> tuple[float, float]:
    losses, correct = 0.0, 0
    for s in range(0, len(data), chunk):
        part = data.take(np.arange(s, min(s + chunk, len(data))))
        _, P = model.predict(part)
        rows = np.arange(len(part))
        losses += float(-np.log(P[rows, part.labels]).sum())
        correct += int((np.argmax(np.where(part.cmask, P, -1), axis=1) == part.labels).sum())
    return losses / len(data), correct / len(data)


class ModelPolicy(EvictionPolicy):
    """Evicts the resident line with the highest model score.

    Keeps the access history of the rollout; each decision re-encodes the
    most recent ``window`` accesses.
    """

    name = "model"

    def __init__(self, model: CachingModel):
        self.model = model
        self.attention: list[np.ndarray] = []

    def reset(self, trace, config):
        self._trace = trace
        self._pcs = self.model.pc_ids(trace.pcs)
        self._lines = self.model.line_ids(trace.lines())
        self.attention = []

    def victim(self, index, candidates):
        T = self.model.config.window
        lo = max(0, index - T + 1)
        k = index + 1 - lo
        pcs = np.zeros((1, T), dtype=np.int64)
        lines = np.zeros((1, T), dtype=np.int64)
        tmask = np.zeros((1, T), dtype=bool)
        pcs[0, T - k:] = self._pcs[lo:index + 1]
        lines[0, T - k:] = self._lines[lo:index + 1]
        tmask[0, T - k:] = True
        batch = Batch(pcs, lines, tmask, self.model.line_ids(candidates)[None],
                      np.ones((1, len(candidates)), dtype=bool))
        S, _, cache = self.model._forward(batch)
        best = int(np.argmax(S[0]))
        self.attention.append(cache["alpha"][0, best])
        return candidates[best]


def model_policy(model: CachingModel) -> ModelPolicy:
    return ModelPolicy(model)


# checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, model: CachingModel) -> None:
    """Write a self-describing checkpoint.

    Layout (little-endian): 8-byte magic ``CPRBMDL1``; u32 header length;
    UTF-8 JSON header (config, vocabularies as sorted ``[id, index]`` pairs,
    and ``[name, shape]`` for every parameter array in order); then each
    parameter as raw float64 in C order.
    """
    header = {
        "config": asdict(model.config),
        "pc_vocab": sorted([k, v] for k, v in model.pc_vocab.items()),
        "line_vocab": sorted([k, v] for k, v in model.line_vocab.items()),
        "params": [[name, list(model.params[name].shape)] for name in PARAM_NAMES],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in PARAM_NAMES:
            f.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> CachingModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ModelError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    buf = io.BytesIO(data[12 + n:])
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise ModelError(f"{path}: truncated parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise ModelError(f"{path}: trailing bytes after parameters")
    return CachingModel(ModelConfig(**header["config"]),
                        {int(k): int(v) for k, v in header["pc_vocab"]},
                        {int(k): int(v) for k, v in header["line_vocab"]}, params)


# activation recording -----------------------------------------------------

@dataclass
class Activations:
    hidden: np.ndarray        # (len(trace), d_h): final hidden state of each window
    attention: np.ndarray     # (#evictions, window): victim's attention weights
    eviction_index: np.ndarray
    address_embeddings: np.ndarray  # (vocab + 1, d_e), row 0 = OOV
    line_ids: list[int]       # line id of each embedding row (-1 for OOV)
    sim: object = None


def record_activations(model: CachingModel, trace: Trace, cache: CacheConfig,
                       chunk: int = 512) -> Activations:
    """Roll the model over ``trace`` as the cache policy and capture internals.

    The hidden state for access ``i`` is the LSTM output at the last step of
    the window ending at ``i``.
    """
    policy = ModelPolicy(model)
    sim = simulate(trace, cache, policy)
    T = model.config.window
    pcs_all = model.pc_ids(trace.pcs)
    lines_all = model.line_ids(trace.lines())
    n = len(trace)
    hidden = np.zeros((n, model.config.d_h))
    for s in range(0, n, chunk):
        idx = np.arange(s, min(s + chunk, n))
        offs = idx[:, None] - (T - 1) + np.arange(T)[None, :]
        tmask = offs >= 0
        offs = np.maximum(offs, 0)
        batch = Batch(np.where(tmask, pcs_all[offs], 0), np.where(tmask, lines_all[offs], 0),
                      tmask, np.zeros((len(idx), 1), dtype=np.int64),
                      np.ones((len(idx), 1), dtype=bool))
        hidden[idx] = model.hidden_states(batch)[:, -1]
    rows = sorted(model.line_vocab.items(), key=lambda kv: kv[1])
    attention = (np.array(policy.attention) if policy.attention
                 else np.zeros((0, T)))
    return Activations(hidden, attention, np.array([e.index for e in sim.evictions]),
                       model.params["addr_emb"].copy(), [-1] + [line for line, _ in rows], sim)
