"""Toy prompt-conditioned detector.

Patch-embedding encoder -> query selection (or learned queries) -> a stack of
decoder layers that refine the object queries and the class prototypes
against the image tokens -> class logits as query/prototype dot products,
box and mask heads applied to every layer's output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .. import pqs
from ..cpe import ClassPrototype
from ..numcore import MLP, CrossAttention, LayerNorm, Linear, Module, Parameter, Tensor, load_params, no_grad, save_params
from ..numcore import ops
from ..sspe import DEFAULT_BINS, PromptEncoder, radial_spectrum, roi_token_mask


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    d: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 3
    k: int = 16
    mask_stride: int = 4
    bins: int = DEFAULT_BINS
    use_spectral: bool = True
    use_pqs: bool = True
    query_self_attention: bool = True
    tau: float = 1.0
    relevance_scale: float = 10.0
    box_from_mask: bool = True
    zero_residual: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch or self.image_size % self.mask_stride:
            raise ValueError("image size must be divisible by the patch size and the mask stride")
        if self.d < 2 or self.k < 1 or self.decoder_layers < 1 or self.encoder_layers < 0:
            raise ValueError("invalid model dimensions")
        if self.k > self.num_tokens:
            raise ValueError(f"k={self.k} exceeds the {self.num_tokens} image tokens")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def mask_grid(self) -> int:
        return self.image_size // self.mask_stride

    @classmethod
    def from_dict(cls, values: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown model config keys {sorted(unknown)}")
        return cls(**values)


@dataclass
class LayerOutput:
    class_logits: Tensor  # (B, k, C)
    boxes: Tensor  # (B, k, 4) cxcywh in (0, 1)
    mask_logits: Tensor  # (B, k, H' * W')


@dataclass
class ForwardOutput:
    layers: list[LayerOutput]
    selected: np.ndarray | None  # (B, k) token indices when queries are selected
    hidden: list[Tensor] = field(default_factory=list)  # pre-projection decoder states


@dataclass
class DetectionResult:
    """Retained detections for one image; ``boxes`` are normalised cxcywh."""

    boxes: np.ndarray  # (n, 4)
    scores: np.ndarray  # (n,)
    labels: np.ndarray  # (n,) class ids taken from the prototypes
    class_logits: np.ndarray  # (n, C)
    mask_logits: np.ndarray  # (n, H' * W')
    masks: np.ndarray  # (n, H, W) bool
    query_indices: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.scores)


DEFAULT_BOX_SIZE = 0.2


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sinusoidal_positions(grid: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """(grid*grid, d) encoding: first half of the channels code y, second half x."""
    half = d // 2
    n_freq = max(half // 2, 1)
    freqs = temperature ** (-np.arange(n_freq) / n_freq)
    coords = (np.arange(grid) + 0.5) / grid * 2 * np.pi

    def code(c):
        ang = c[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :half]

    cy, cx = code(coords), code(coords)
    pos = np.zeros((grid, grid, d))
    pos[:, :, :half] = cy[:, None, :]
    pos[:, :, half : 2 * half] = cx[None, :, :]
    return pos.reshape(grid * grid, d)


def patchify(images, patch: int) -> Tensor:
    """(B, H, W) -> (B, (H/p)(W/p), p*p) in row-major patch order."""
    images = ops.as_tensor(images)
    b, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch)
    x = ops.transpose(x, (0, 1, 3, 2, 4))
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


def standardize(images, eps: float = 1e-2) -> Tensor:
    """Per-image zero mean / unit spread, so defect contrast is not drowned by the positional code."""
    images = ops.as_tensor(images)
    centred = images - images.mean(axis=(-2, -1), keepdims=True)
    sd = ops.sqrt((centred * centred).mean(axis=(-2, -1), keepdims=True))
    return centred / (sd + eps)


class EncoderBlock(Module):
    def __init__(self, d: int, rng: np.random.Generator, zero_out: bool):
        self.norm1 = LayerNorm(d)
        self.attn = CrossAttention(d, rng, zero_out=zero_out)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP([d, 2 * d, d], rng, zero_last=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.ffn(self.norm2(x))


class VisionEncoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Linear(config.patch**2, config.d, rng, zero=config.zero_residual)
        self.blocks = [EncoderBlock(config.d, rng, config.zero_residual) for _ in range(config.encoder_layers)]
        self.positions = sinusoidal_positions(config.grid, config.d)

    def forward(self, images) -> Tensor:
        images = ops.as_tensor(images)
        single = images.ndim == 2
        if single:
            images = images.reshape(1, *images.shape)
        h, w = images.shape[-2:]
        if h % self.config.patch or w % self.config.patch:
            raise ValueError(f"image {h}x{w} is not divisible by patch size {self.config.patch}")
        if (h, w) != (self.config.image_size,) * 2:
            raise ValueError(f"encoder built for {self.config.image_size}px images, got {h}x{w}")
        x = self.embed(patchify(standardize(images), self.config.patch)) + self.positions
        for block in self.blocks:
            x = block(x)
        return x.reshape(*x.shape[1:]) if single else x


class DecoderLayer(Module):
    def __init__(self, d: int, rng: np.random.Generator, self_attention: bool):
        self.norm_q = LayerNorm(d)
        self.self_attn = CrossAttention(d, rng) if self_attention else None
        self.norm_x = LayerNorm(d)
        self.cross = CrossAttention(d, rng)
        self.norm_f = LayerNorm(d)
        self.ffn = MLP([d, 2 * d, d], rng)

    def forward(self, x: Tensor, tokens: Tensor, n_queries: int) -> Tensor:
        if self.self_attn is not None and n_queries > 1:
            # queries exchange information among themselves; prototypes stay independent
            q = x[..., :n_queries, :]
            y = self.norm_q(q)
            q = q + self.self_attn(y, y)
            x = ops.concat([q, x[..., n_queries:, :]], axis=-2)
        x = x + self.cross(self.norm_x(x), tokens)
        return x + self.ffn(self.norm_f(x))


class Decoder(Module):
    """L layers over the concatenation [queries; prototypes] with one shared readout h."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.layers = [DecoderLayer(config.d, rng, config.query_self_attention) for _ in range(config.decoder_layers)]
        self.norm = LayerNorm(config.d)
        self.h = Linear(config.d, config.d, rng)
        self.d = config.d

    def forward(self, queries, prototypes, tokens) -> tuple[list[tuple[Tensor, Tensor]], list[Tensor]]:
        """Returns per-layer (q_hat, p_hat) and the normalised states h is applied to."""
        queries, prototypes, tokens = (ops.as_tensor(t) for t in (queries, prototypes, tokens))
        for name, t in (("queries", queries), ("prototypes", prototypes), ("tokens", tokens)):
            if t.shape[-1] != self.d:
                raise ValueError(f"dimension mismatch: {name} have width {t.shape[-1]}, decoder expects {self.d}")
        k = queries.shape[-2]
        if prototypes.ndim < queries.ndim:
            # broadcast shared prototypes across the batch
            prototypes = ops.reshape(prototypes, (1,) * (queries.ndim - prototypes.ndim) + prototypes.shape)
            prototypes = prototypes + np.zeros(queries.shape[:-2] + (1, 1))
        x = ops.concat([queries, prototypes], axis=-2)
        outputs, hidden = [], []
        for layer in self.layers:
            x = layer(x, tokens, k)
            state = self.norm(x)
            hidden.append(state)
            y = self.h(state)
            outputs.append((y[..., :k, :], y[..., k:, :]))
        return outputs, hidden


def class_logits(p_hat, q_hat) -> Tensor:
    """y[..., i, c] = p_hat[c] . q_hat[i]."""
    p_hat, q_hat = ops.as_tensor(p_hat), ops.as_tensor(q_hat)
    if p_hat.shape[-1] != q_hat.shape[-1]:
        raise ValueError(f"shape mismatch: prototypes {p_hat.shape} vs queries {q_hat.shape}")
    return q_hat @ p_hat.mT


class PixelDecoder(Module):
    """Per-pixel features at image/stride: local patch projection plus upsampled tokens."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.local = Linear(config.mask_stride**2, config.d, rng)
        self.from_tokens = Linear(config.d, config.d, rng)
        self.out = MLP([config.d, config.d], rng)
        g, mg = config.grid, config.mask_grid
        rows = (np.arange(mg) * g) // mg
        self.upsample_index = (rows[:, None] * g + rows[None, :]).ravel()

    def forward(self, images, tokens: Tensor) -> Tensor:
        local = self.local(patchify(standardize(images), self.config.mask_stride))
        up = ops.gather(tokens, self.upsample_index, axis=1)
        return self.out(ops.gelu(local + self.from_tokens(up)))


class Detector(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.encoder = VisionEncoder(config, rng)
        self.prompt_encoder = PromptEncoder(config.d, rng, bins=config.bins, use_spectral=config.use_spectral)
        self.decoder = Decoder(config, rng)
        self.box_head = MLP([config.d, config.d, config.d, 4], rng, activation="relu")
        self.mask_embed = MLP([config.d, config.d, config.d], rng, activation="relu")
        self.pixel = PixelDecoder(config, rng)
        self.query_embed = None if config.use_pqs else Parameter(rng.normal(0.0, 1.0, size=(config.k, config.d)))
        # learned queries also learn where to look; selected queries use their token's cell
        self.query_reference = None if config.use_pqs else Parameter(rng.uniform(-1.5, 1.5, size=(config.k, 2)))
        g = config.grid
        centers = (np.arange(g) + 0.5) / g
        self.token_centers = np.stack(np.meshgrid(centers, centers, indexing="ij")[::-1], axis=-1).reshape(-1, 2)

    # -- prompts -----------------------------------------------------------

    def embed_prompts(self, images, regions: Sequence[tuple[int, np.ndarray]]) -> Tensor:
        """Embeddings (N, d) for prompt regions given as (image index, pixel mask)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if not regions:
            raise ValueError("no prompt regions given")
        tokens = self.encoder(images)
        idx = [int(i) for i, _ in regions]
        roi = np.stack([roi_token_mask(m, self.config.patch) for _, m in regions])
        spectra = np.stack([radial_spectrum(images[i], _mask_box(m), self.config.bins) for i, m in regions])
        return self.prompt_encoder(ops.gather(tokens, idx, axis=0), roi, spectra)

    # -- detection ---------------------------------------------------------

    def forward(self, images, prototypes, rng: np.random.Generator | None = None) -> ForwardOutput:
        """images (B, H, W); prototypes (C, d). ``rng`` enables Gumbel noise in query selection."""
        images = ops.as_tensor(images)
        if images.ndim == 2:
            images = images.reshape(1, *images.shape)
        prototypes = ops.as_tensor(prototypes)
        if prototypes.ndim != 2 or prototypes.shape[0] == 0:
            raise ValueError("no prompted classes")
        b = images.shape[0]
        tokens = self.encoder(images)
        selected = None
        if self.config.use_pqs:
            # cosine relevance is sharpened so Gumbel noise perturbs rather than swamps it
            scores = pqs.relevance_scores(tokens, prototypes) * self.config.relevance_scale
            sel_cfg = pqs.SelectionConfig(k=self.config.k, tau=self.config.tau, noise_enabled=rng is not None)
            result = pqs.gumbel_topk(scores, sel_cfg, rng)
            queries = pqs.select_queries(tokens, result)
            selected = result.selected_indices
            ref = Tensor(_logit(self.token_centers[selected]))
        else:
            queries = self.query_embed + np.zeros((b, 1, 1))
            ref = self.query_reference + np.zeros((b, 1, 1))
        # box = sigmoid(delta + prior), prior = (reference centre, default size)
        prior = ops.concat([ref, Tensor(np.full(ref.shape, _logit(DEFAULT_BOX_SIZE)))], axis=-1)
        decoded, hidden = self.decoder(queries, prototypes, tokens)
        pixels = self.pixel(images, tokens)
        layers = []
        z = prior
        for q_hat, p_hat in decoded:
            # each layer refines the previous layer's box; the reference is not back-propagated through
            z = self.box_head(q_hat) + Tensor(z.data)
            layers.append(
                LayerOutput(
                    class_logits=class_logits(p_hat, q_hat),
                    boxes=ops.sigmoid(z),
                    mask_logits=self.mask_embed(q_hat) @ pixels.mT,
                )
            )
        return ForwardOutput(layers, selected, hidden)

    def predict(self, image, prototypes, score_threshold: float = 0.3) -> DetectionResult:
        """Detections for one image from stored prototypes (never re-encodes prompts)."""
        if isinstance(prototypes, (str, Path)):
            from ..cpe import load_prototypes

            prototypes = load_prototypes(prototypes)
        class_ids, matrix = _prototype_matrix(prototypes)
        image = np.asarray(image, dtype=np.float64)
        with no_grad():
            last = self.forward(image[None], Tensor(matrix)).layers[-1]
        logits = last.class_logits.data[0]
        mlog = last.mask_logits.data[0]
        # one candidate per (query, class) pair, as in set-prediction detectors;
        # sigmoid of a finite logit is < 1, keep that true in floating point too
        probs = np.minimum(ops._sigmoid(logits), np.nextafter(1.0, 0.0))
        q_idx, c_idx = np.nonzero(probs >= score_threshold)
        scores = probs[q_idx, c_idx]
        order = np.lexsort((c_idx, q_idx, -scores))
        keep, c_idx, scores = q_idx[order], c_idx[order], scores[order]
        labels = np.asarray(class_ids, dtype=np.int64)[c_idx]
        masks = upsample_mask_logits(mlog[keep], self.config.mask_grid, image.shape) > 0.0
        boxes = clip_boxes(last.boxes.data[0][keep])
        if self.config.box_from_mask:
            boxes = masks_to_boxes(masks, boxes)
        return DetectionResult(
            boxes=boxes,
            scores=scores,
            labels=labels,
            class_logits=logits[keep],
            mask_logits=mlog[keep],
            masks=masks,
            query_indices=keep,
        )

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_params(path, self.state_dict())
        Path(str(path) + ".json").write_text(json.dumps(asdict(self.config), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> Detector:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        meta = Path(str(path) + ".json")
        if not meta.exists():
            raise FileNotFoundError(f"checkpoint config {meta} not found")
        model = cls(ModelConfig.from_dict(json.loads(meta.read_text())))
        model.load_state_dict(load_params(path))
        return model


def _mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("prompt mask is empty")
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    # the spectrum needs at least a 2x2 support
    return x0, y0, max(x1, x0 + 2), max(y1, y0 + 2)


def _prototype_matrix(prototypes) -> tuple[list[int], np.ndarray]:
    if isinstance(prototypes, Tensor) or isinstance(prototypes, np.ndarray):
        arr = np.asarray(getattr(prototypes, "data", prototypes), dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError("no prompted classes")
        return list(range(arr.shape[0])), arr
    prototypes = list(prototypes)
    if not prototypes:
        raise ValueError("no prompted classes")
    if not all(isinstance(p, ClassPrototype) for p in prototypes):
        raise TypeError("prototypes must be ClassPrototype records or a (C, d) array")
    return [p.class_id for p in prototypes], np.stack([p.vector for p in prototypes])


def upsample_mask_logits(logits: np.ndarray, grid: int, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of (n, grid*grid) logits onto the full (n, H, W) pixel grid."""
    h, w = shape
    out = np.zeros((len(logits), h, w))
    ys = (np.arange(h) + 0.5) * grid / h - 0.5
    xs = (np.arange(w) + 0.5) * grid / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for i, lg in enumerate(logits):
        out[i] = map_coordinates(lg.reshape(grid, grid), [yy, xx], order=1, mode="nearest")
    return out


def masks_to_boxes(masks: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Normalised cxcywh tight boxes of binary masks; empty masks keep the regressed box."""
    out = np.array(fallback, dtype=np.float64, copy=True)
    for i, m in enumerate(masks):
        rows = np.flatnonzero(m.any(axis=1))
        if rows.size == 0:
            continue
        cols = np.flatnonzero(m.any(axis=0))
        h, w = m.shape
        x0, y0, x1, y1 = cols[0], rows[0], cols[-1] + 1, rows[-1] + 1
        out[i] = [(x0 + x1) / (2 * w), (y0 + y1) / (2 * h), (x1 - x0) / w, (y1 - y0) / h]
    return out


def clip_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clamp cxcywh boxes to the unit square, keeping a tiny positive extent."""
    if len(boxes) == 0:
        return boxes.reshape(0, 4)
    cx, cy, w, h = boxes.T
    x0, x1 = np.clip(cx - w / 2, 0, 1), np.clip(cx + w / 2, 0, 1)
    y0, y1 = np.clip(cy - h / 2, 0, 1), np.clip(cy + h / 2, 0, 1)
    x1, y1 = np.maximum(x1, x0 + 1e-6), np.maximum(y1, y0 + 1e-6)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=1)
