"""Optimization of aggregation-head parameters on mined batches.

Heads are thin adapters exposing a uniform trainable surface (named
parameter arrays, forward to an embedding, backward from an embedding
gradient). The optimizer is adaptive-moment with decoupled weight decay;
the learning rate decays exponentially per epoch.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import aggregate
from .losses import LossConfig, batch_ranked_list_loss, batch_triplet_loss

CHECKPOINT_VERSION = 1

LOSS_KINDS = ("triplet", "ranked-list")


class TrainingDivergedError(RuntimeError):
    pass


class RestoreError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-5
    lr_decay_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 5e-4
    epochs: int = 20
    iterations_per_epoch: int = 2000
    loss_kind: str = "ranked-list"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0 or self.lr_decay_rate <= 0:
            raise ValueError("learning rate and decay rate must be positive")
        if self.epochs < 1 or self.iterations_per_epoch < 1:
            raise ValueError("epochs and iterations_per_epoch must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def learning_rate(self, epoch):
        return self.initial_lr * float(np.exp(-self.lr_decay_rate * epoch))


# ---------------------------------------------------------------------------
# trainable heads


class LinearHead:
    """Linear projection over precomputed descriptors, L2-normalized."""

    kind = "linear"

    def __init__(self, weight):
        self.weight = np.asarray(weight, dtype=np.float64)

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim))

    def trainable(self):
        return {"weight": self.weight}

    def forward(self, vec, source=""):
        vec = np.asarray(vec, dtype=np.float64)
        z = self.weight @ vec
        descriptor, norm = aggregate._finalize(z, self.kind, source)
        return descriptor, {"input": vec, "out": descriptor.vector, "norm": norm}

    def backward(self, cache, upstream):
        g_z = aggregate._l2_norm_backward(cache["out"], cache["norm"],
                                          np.asarray(upstream, dtype=np.float64))
        return {"weight": np.outer(g_z, cache["input"])}

    def post_update(self):
        pass


class NetVladHead:
    kind = "netvlad"

    def __init__(self, params):
        self.params = params

    def trainable(self):
        return {"centers": self.params.centers,
                "assign_weights": self.params.assign_weights,
                "assign_bias": self.params.assign_bias}

    def forward(self, fmap, source=""):
        return aggregate.netvlad_forward(fmap, self.params, source)

    def backward(self, cache, upstream):
        grads = aggregate.netvlad_backward(cache, upstream)
        grads.pop("input")
        return grads

    def post_update(self):
        pass


class GemHead:
    kind = "gem"

    def __init__(self, params):
        self.params = params

    def trainable(self):
        return {"p": self.params.p}

    def forward(self, fmap, source=""):
        return aggregate.gem_forward(fmap, self.params, source)

    def backward(self, cache, upstream):
        grads = aggregate.gem_backward(cache, upstream)
        return {"p": np.asarray(grads["p"], dtype=np.float64)}

    def post_update(self):
        # exponents below 1 leave the average-to-max interpolation regime
        np.maximum(self.params.p, 1.0, out=self.params.p)


class MaxHead:
    """Parameter-free; usable for embedding but not for training."""

    kind = "max"

    def trainable(self):
        return {}

    def forward(self, fmap, source=""):
        return aggregate.max_pool_forward(fmap, source)

    def backward(self, cache, upstream):
        return {}

    def post_update(self):
        pass


def make_head(kind, **kwargs):
    if kind == "linear":
        return LinearHead(**kwargs)
    if kind == "netvlad":
        return NetVladHead(**kwargs)
    if kind == "gem":
        return GemHead(**kwargs)
    if kind == "max":
        return MaxHead()
    raise ValueError(f"unknown head kind {kind!r}")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    head: object
    step: int = 0
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    metrics_log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, head, seed=0):
        moments_m = {k: np.zeros_like(v) for k, v in head.trainable().items()}
        moments_v = {k: np.zeros_like(v) for k, v in head.trainable().items()}
        rng = np.random.Generator(np.random.Philox(key=seed))
        return cls(head=head, moments_m=moments_m, moments_v=moments_v,
                   rng_state=rng.bit_generator.state)

    def epoch(self, cfg):
        return self.step // cfg.iterations_per_epoch


def train(batches, inputs, cfg, head=None, state=None, num_steps=None):
    """Run (or resume) training; the state is mutated and returned.

    ``batches`` is a sequence of TrainingBatch cycled over; ``inputs``
    maps image id to the head's input (feature map or descriptor vector).
    A non-finite loss aborts with the offending step.
    """
    if state is None:
        if head is None:
            raise ValueError("either a head or a state to resume is required")
        state = TrainState.fresh(head, seed=cfg.seed)
    head = state.head
    params = head.trainable()
    total = cfg.epochs * cfg.iterations_per_epoch
    target = min(total, state.step + num_steps) if num_steps is not None else total

    loss_fn = batch_ranked_list_loss if cfg.loss_kind == "ranked-list" else batch_triplet_loss

    while state.step < target:
        epoch = state.step // cfg.iterations_per_epoch
        lr = cfg.learning_rate(epoch)
        batch = batches[state.step % len(batches)]

        embeddings, caches = {}, {}
        for image_id in dict.fromkeys(batch.image_ids()):
            descriptor, cache = head.forward(inputs[image_id])
            embeddings[image_id] = descriptor.vector
            caches[image_id] = cache

        report = loss_fn(batch, embeddings, cfg.loss)
        if not np.isfinite(report.value):
            raise TrainingDivergedError(
                f"non-finite loss {report.value} at step {state.step}")

        grads = {key: np.zeros_like(value) for key, value in params.items()}
        for image_id, g_embed in report.grads["by_image"].items():
            for key, g in head.backward(caches[image_id], g_embed).items():
                grads[key] += g

        t = state.step + 1
        for key, param in params.items():
            m = state.moments_m[key]
            v = state.moments_v[key]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grads[key]
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grads[key] ** 2
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            param -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
            param -= lr * cfg.weight_decay * param  # decoupled decay
        head.post_update()

        state.loss_history.append(report.value)
        state.metrics_log.append(
            f"{state.step} {epoch} {lr:.10e} {report.value:.10e} {report.active_terms}")
        state.step += 1
    return state


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint(state, cfg):
    """Serialize the full training state; restoring continues the exact
    trajectory."""
    head = state.head
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "head": head.kind,
        "rng_state": _encode_rng(state.rng_state),
        "loss_history": state.loss_history,
        "loss_kind": cfg.loss_kind,
    }
    if head.kind == "netvlad":
        meta["sharpness"] = head.params.sharpness
    arrays = {}
    for key, value in head.trainable().items():
        arrays[f"param_{key}"] = value
        arrays[f"m_{key}"] = state.moments_m[key]
        arrays[f"v_{key}"] = state.moments_v[key]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def restore(data):
    try:
        archive = np.load(io.BytesIO(data), allow_pickle=False)
        meta = json.loads(bytes(archive["meta"]).decode())
    except Exception as exc:
        raise RestoreError(f"unreadable checkpoint: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise RestoreError(f"unsupported checkpoint version {meta.get('version')}")

    kind = meta["head"]
    params = {key[len("param_"):]: np.array(archive[key])
              for key in archive.files if key.startswith("param_")}
    if kind == "linear":
        head = LinearHead(params["weight"])
    elif kind == "gem":
        head = GemHead(aggregate.GemParams(p=params["p"]))
    elif kind == "netvlad":
        head = NetVladHead(aggregate.NetVladParams(
            centers=params["centers"], assign_weights=params["assign_weights"],
            assign_bias=params["assign_bias"], sharpness=meta["sharpness"]))
    elif kind == "max":
        head = MaxHead()
    else:
        raise RestoreError(f"unknown head kind {kind!r}")

    state = TrainState(head=head, step=meta["step"],
                       rng_state=_decode_rng(meta["rng_state"]),
                       loss_history=list(meta["loss_history"]))
    for key, param in head.trainable().items():
        m = np.array(archive[f"m_{key}"])
        v = np.array(archive[f"v_{key}"])
        if m.shape != param.shape or v.shape != param.shape:
            raise RestoreError(f"moment shape mismatch for {key!r}")
        state.moments_m[key] = m
        state.moments_v[key] = v
    return state


def _encode_rng(rng_state):
    def enc(obj):
        if isinstance(obj, dict):
            return {k: enc(v) for k, v in obj.items()}
        if isinstance(obj, np.ndarray):
            return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
        if isinstance(obj, np.integer):
            return int(obj)
        return obj

    return enc(rng_state)


def _decode_rng(encoded):
    def dec(obj):
        if isinstance(obj, dict):
            if "__ndarray__" in obj:
                return np.array(obj["__ndarray__"], dtype=obj["dtype"])
            return {k: dec(v) for k, v in obj.items()}
        return obj

    return dec(encoded)
