"""Class prototypes and the angular-margin contrastive loss over prompt embeddings."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import MLP, AdamW, Tensor
from .numcore import ops

NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class ClassPrototype:
    class_id: int
    vector: np.ndarray
    member_count: int


@dataclass(frozen=True)
class CpeConfig:
    alpha: float = 30.0
    margin: float = 0.5
    clamp_epsilon: float = 1e-7

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if not 0 < self.clamp_epsilon < 1e-3:
            raise ValueError("clamp_epsilon must lie in (0, 1e-3)")


def class_prototypes(embeddings: Sequence) -> list[ClassPrototype]:
    """Mean embedding per class label, ascending by class id."""
    if not embeddings:
        raise ValueError("class_prototypes needs at least one embedding")
    groups: dict[int, list[np.ndarray]] = {}
    for e in embeddings:
        groups.setdefault(int(e.class_label), []).append(np.asarray(e.vector, dtype=np.float64))
    d = {v.shape for vs in groups.values() for v in vs}
    if len(d) != 1:
        raise ValueError(f"embeddings have inconsistent shapes {sorted(d)}")
    return [ClassPrototype(c, np.mean(groups[c], axis=0), len(groups[c])) for c in sorted(groups)]


def cosine_sim(prototype, embedding, clamp_epsilon: float = 1e-7) -> float:
    p = np.asarray(getattr(prototype, "vector", prototype), dtype=np.float64)
    e = np.asarray(getattr(embedding, "vector", embedding), dtype=np.float64)
    np_, ne = np.linalg.norm(p), np.linalg.norm(e)
    if np_ <= NORM_FLOOR or ne <= NORM_FLOOR:
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm vector")
    c = float(p @ e) / (np_ * ne)
    return min(max(c, -1.0 + clamp_epsilon), 1.0 - clamp_epsilon)


def _check_norms(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if (norms <= NORM_FLOOR).any():
        raise DegenerateEmbeddingError(f"degenerate embedding: zero-norm {what}")


def cosine_matrix(a, b, clamp_epsilon: float = 1e-7) -> Tensor:
    """Clamped cosine similarity between rows: (..., N, d) x (..., M, d) -> (..., N, M)."""
    a, b = ops.as_tensor(a), ops.as_tensor(b)
    _check_norms(a, "row")
    _check_norms(b, "row")
    cos = ops.l2_normalize(a) @ ops.l2_normalize(b).mT
    return ops.clamp(cos, -1.0 + clamp_epsilon, 1.0 - clamp_epsilon)


def membership(labels: Sequence[int], classes: Sequence[int] | None = None) -> tuple[list[int], np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    onehot = (labels[None, :] == np.asarray(classes)[:, None]).astype(np.float64)
    return classes, onehot


def prototype_tensor(embeddings, labels: Sequence[int], classes: Sequence[int] | None = None) -> tuple[list[int], Tensor]:
    """Differentiable per-class mean: returns (class ids, (C, d) tensor)."""
    embeddings = ops.as_tensor(embeddings)
    if embeddings.shape[0] == 0:
        raise ValueError("prototype_tensor needs at least one embedding")
    classes, onehot = membership(labels, classes)
    counts = onehot.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        missing = [c for c, n in zip(classes, counts[:, 0]) if n == 0]
        raise ValueError(f"no embeddings for classes {missing}")
    return classes, ops.matmul(Tensor(onehot / counts), embeddings)


def margin_logits(cos: Tensor, target: np.ndarray, config: CpeConfig) -> Tensor:
    """alpha * cos, with the target column replaced by alpha * cos(theta + m).

    ``cos(theta + m) = cos(theta) cos(m) - sin(theta) sin(m)`` on the clamped
    cosine, so no arccos derivative appears.
    """
    sin = ops.sqrt(1.0 - cos * cos)
    shifted = cos * math.cos(config.margin) - sin * math.sin(config.margin)
    return ops.where(target, shifted, cos) * config.alpha


def cpe_loss(
    embeddings,
    labels: Sequence[int],
    config: CpeConfig = CpeConfig(),
    prototypes: Tensor | None = None,
    classes: Sequence[int] | None = None,
    detach_prototypes: bool = False,
    leave_one_out: bool = False,
) -> Tensor:
    """Angular-margin loss averaged over all N prompt instances.

    Prototypes default to the per-class mean of ``embeddings`` (gradient flows
    through the mean unless ``detach_prototypes``). ``leave_one_out`` removes
    each anchor from its own class mean where the class has another member.
    """
    embeddings = ops.as_tensor(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0] or labels.shape[0] == 0:
        raise ValueError(f"need (N, d) embeddings with N labels, got {embeddings.shape} and {labels.shape}")
    if prototypes is None:
        classes, prototypes = prototype_tensor(embeddings, labels, classes)
    else:
        prototypes = ops.as_tensor(prototypes)
        classes = list(range(prototypes.shape[0])) if classes is None else list(classes)
        if len(classes) != prototypes.shape[0]:
            raise ValueError("classes and prototypes disagree in length")
    missing = set(labels.tolist()) - set(classes)
    if missing:
        raise KeyError(f"labels without a prototype: {sorted(missing)}")
    if detach_prototypes:
        prototypes = prototypes.detach()

    target = labels[:, None] == np.asarray(classes)[None, :]
    cos = cosine_matrix(embeddings, prototypes, config.clamp_epsilon)
    if leave_one_out:
        cos = _leave_one_out_cos(embeddings, labels, classes, prototypes, target, cos, config)
    logits = margin_logits(cos, target, config)
    logp = ops.log_softmax(logits, axis=-1)
    return -(logp * target.astype(np.float64)).sum() / float(labels.shape[0])


def _leave_one_out_cos(embeddings, labels, classes, prototypes, target, cos, config):
    _, onehot = membership(labels, classes)
    own = onehot.sum(axis=1)[[classes.index(y) for y in labels]]
    ok = own > 1
    if not ok.any():
        return cos
    # own-class mean without the anchor: (n p - e) / (n - 1)
    own_proto = ops.gather(prototypes, [classes.index(y) for y in labels], axis=0)
    n = np.where(ok, own, 2.0)[:, None]
    loo = (own_proto * n - embeddings) / (n - 1.0)
    _check_norms(loo[np.nonzero(ok)[0]], "leave-one-out prototype")
    row_cos = (ops.l2_normalize(embeddings) * ops.l2_normalize(loo)).sum(axis=-1, keepdims=True)
    row_cos = ops.clamp(row_cos, -1.0 + config.clamp_epsilon, 1.0 - config.clamp_epsilon)
    return ops.where(target & ok[:, None], row_cos, cos)


# -- serialisation -----------------------------------------------------------

_PROTO_VERSION = 1


def save_prototypes(path: str | Path, prototypes: Sequence[ClassPrototype]) -> None:
    """``u32 version, u32 count, u32 d`` then per class ``i64 id, u32 members, f64[d]``."""
    if not prototypes:
        raise ValueError("no prototypes to save")
    d = len(prototypes[0].vector)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", _PROTO_VERSION, len(prototypes), d))
        for p in prototypes:
            vec = np.asarray(p.vector, dtype="<f8")
            if vec.shape != (d,):
                raise ValueError("prototypes have inconsistent widths")
            fh.write(struct.pack("<qI", int(p.class_id), int(p.member_count)))
            fh.write(vec.tobytes())


def load_prototypes(path: str | Path) -> list[ClassPrototype]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prototype file {path} not found")
    buf = path.read_bytes()
    version, count, d = struct.unpack_from("<III", buf, 0)
    if version != _PROTO_VERSION:
        raise ValueError(f"unsupported prototype file version {version}")
    off = 12
    out = []
    for _ in range(count):
        cid, members = struct.unpack_from("<qI", buf, off)
        off += 12
        vec = np.frombuffer(buf, dtype="<f8", count=d, offset=off).astype(np.float64)
        off += 8 * d
        out.append(ClassPrototype(cid, vec, members))
    return out


# -- small metric-learning fit used by the analysis and acceptance checks ---------

def synthetic_clusters(n_per_class: int, n_classes: int, dim: int, rng: np.random.Generator,
                       spread: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    centres = rng.normal(size=(n_classes, dim))
    x = np.concatenate([c + spread * rng.normal(size=(n_per_class, dim)) for c in centres])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return x, y


def fit_cluster_embedding(steps: int = 500, seed: int = 42, n_classes: int = 4, dim: int = 16, d: int = 16,
                          config: CpeConfig = CpeConfig(), lr: float = 1e-2) -> dict:
    """Train a small perceptron with the angular-margin loss on Gaussian clusters.

    Returns held-out embeddings/labels and the learned prototypes.
    """
    rng = np.random.default_rng(seed)
    x, y = synthetic_clusters(64, n_classes, dim, rng)
    net = MLP([dim, 32, d], rng)
    opt = AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    for _ in range(steps):
        idx = rng.choice(len(x), size=64, replace=False)
        loss = cpe_loss(net(Tensor(x[idx])), y[idx], config)
        loss.backward()
        opt.step()
    held_x = x + 0.05 * rng.normal(size=x.shape)
    emb = net(Tensor(held_x)).data
    protos = class_prototypes([_Emb(v, c) for v, c in zip(emb, y)])
    return {"embeddings": emb, "labels": y, "prototypes": protos, "final_loss": float(loss.data)}


@dataclass
class _Emb:
    vector: np.ndarray
    class_label: int
