"""The DCAL network: L self-attention blocks, one GLCA block, T weight-shared
PWCA blocks, per-branch classifiers, losses and inference fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (
    EncoderBlockParams,
    LayerNormParams,
    block_shapes,
    drop_schedule,
    encoder_block,
    head_average,
    init_block,
    init_layer_norm,
)
from .cross_attention import glca_block, pwca_block_kv
from .embedding import ImageSample, embed_tokens, patch_grid, patchify_batch
from .rollout import LocalSelection, RolloutMap, cls_response, num_selected, rollout, select_local_queries
from .tensor import ContractError, ShapeError, Tensor

TASKS = ("classification", "retrieval")
DEFAULT_RATIO = {"classification": 0.1, "retrieval": 0.3}
MODES = ("sa", "glca", "sa+glca")
BRANCHES = ("sa", "glca", "pwca")
# fixed input standardisation applied to [0, 1] pixels before patch projection
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ConfigError(ValueError):
    pass


@dataclass
class DcalConfig:
    depth: int = 4  # L, self-attention blocks
    glca_blocks: int = 1  # M, 0 or 1
    pwca_blocks: int = 4  # T <= L, aliased onto the first T SA blocks
    heads: int = 2
    dim: int = 32
    patch_size: int = 8
    ratio: float | None = None  # R, fraction of patches used as local queries; None -> per task
    num_classes: int = 8
    task: str = "classification"
    drop_path_max: float = 0.1
    glca_depth: int | None = None  # SA block feeding GLCA; None -> depth
    image_height: int = 32
    image_width: int = 32
    channels: int = 1
    triplet_margin: float = 0.3

    def __post_init__(self):
        if self.ratio is None:
            self.ratio = DEFAULT_RATIO.get(self.task, DEFAULT_RATIO["classification"])
        if self.glca_depth is None:
            self.glca_depth = self.depth

    def validate(self) -> "DcalConfig":
        problems = []
        if self.depth < 1:
            problems.append("depth must be >= 1")
        if self.glca_blocks not in (0, 1):
            problems.append("glca_blocks must be 0 or 1")
        if not 0 <= self.pwca_blocks <= self.depth:
            problems.append("pwca_blocks must lie in [0, depth]")
        if self.heads < 1 or self.dim % self.heads:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 < self.ratio <= 1.0:
            problems.append("ratio must lie in (0, 1]")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.task not in TASKS:
            problems.append(f"task must be one of {TASKS}")
        if not 0.0 <= self.drop_path_max < 1.0:
            problems.append("drop_path_max must lie in [0, 1)")
        if not 1 <= self.glca_depth <= self.depth:
            problems.append("glca_depth must lie in [1, depth]")
        if self.channels not in (1, 3):
            problems.append("channels must be 1 or 3")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            problems.append("image size not divisible by patch_size")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def grid(self) -> tuple[int, int]:
        return patch_grid(self.image_height, self.image_width, self.patch_size)

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_local(self) -> int:
        return num_selected(self.num_patches, self.ratio)


def param_shapes(cfg: DcalConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    d, c = cfg.dim, cfg.num_classes
    shapes = {
        "embed.proj": (cfg.patch_dim, d),
        "embed.cls": (1, d),
        "embed.pos": (cfg.num_patches + 1, d),
    }
    for i in range(cfg.depth):
        shapes.update({f"blocks.{i}.{k}": s for k, s in block_shapes(d).items()})
    shapes.update({"norm.gamma": (d,), "norm.beta": (d,), "head.weight": (d, c), "head.bias": (c,)})
    if cfg.glca_blocks:
        shapes.update({f"glca.{k}": s for k, s in block_shapes(d).items()})
        shapes.update(
            {
                "glca_norm.gamma": (d,),
                "glca_norm.beta": (d,),
                "glca_head.weight": (d, c),
                "glca_head.bias": (c,),
            }
        )
    shapes["loss_weights"] = (len(BRANCHES),)
    return shapes


@dataclass
class DcalParams:
    proj: Tensor
    cls: Tensor
    pos: Tensor
    blocks: list[EncoderBlockParams]
    norm: LayerNormParams
    head_w: Tensor
    head_b: Tensor
    loss_weights: Tensor  # (w_sa, w_glca, w_pwca)
    glca: EncoderBlockParams | None = None
    glca_norm: LayerNormParams | None = None
    glca_head_w: Tensor | None = None
    glca_head_b: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out = {"embed.proj": self.proj, "embed.cls": self.cls, "embed.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"blocks.{i}"))
        out.update(
            {
                "norm.gamma": self.norm.gamma,
                "norm.beta": self.norm.beta,
                "head.weight": self.head_w,
                "head.bias": self.head_b,
            }
        )
        if self.glca is not None:
            out.update(self.glca.named("glca"))
            out.update(
                {
                    "glca_norm.gamma": self.glca_norm.gamma,
                    "glca_norm.beta": self.glca_norm.beta,
                    "glca_head.weight": self.glca_head_w,
                    "glca_head.bias": self.glca_head_b,
                }
            )
        out["loss_weights"] = self.loss_weights
        return out

    @classmethod
    def from_named(cls, cfg: DcalConfig, named: dict[str, Tensor]) -> "DcalParams":
        expected = param_shapes(cfg)
        missing = [k for k in expected if k not in named]
        extra = [k for k in named if k not in expected]
        if missing or extra:
            raise ShapeError(f"parameter names disagree with config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(named[name].shape) != shape:
                raise ShapeError(f"{name}: shape {named[name].shape} but config implies {shape}")
        kw = {}
        if cfg.glca_blocks:
            kw = dict(
                glca=EncoderBlockParams.from_named(named, "glca"),
                glca_norm=LayerNormParams(named["glca_norm.gamma"], named["glca_norm.beta"]),
                glca_head_w=named["glca_head.weight"],
                glca_head_b=named["glca_head.bias"],
            )
        return cls(
            proj=named["embed.proj"],
            cls=named["embed.cls"],
            pos=named["embed.pos"],
            blocks=[EncoderBlockParams.from_named(named, f"blocks.{i}") for i in range(cfg.depth)],
            norm=LayerNormParams(named["norm.gamma"], named["norm.beta"]),
            head_w=named["head.weight"],
            head_b=named["head.bias"],
            loss_weights=named["loss_weights"],
            **kw,
        )

    def astype(self, cfg: DcalConfig, dtype) -> "DcalParams":
        """Independent copy with every tensor cast to ``dtype``."""
        named = {k: Tensor(v.data, requires_grad=True, dtype=dtype) for k, v in self.named().items()}
        return DcalParams.from_named(cfg, named)

    def copy(self, cfg: DcalConfig) -> "DcalParams":
        return self.astype(cfg, self.proj.dtype)

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None


def init_params(cfg: DcalConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> DcalParams:
    """Linear weights and position embeddings ~ N(0, 0.02^2); class token,
    biases and loss weights zero; LayerNorm affine identity."""
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, c = cfg.dim, cfg.num_classes

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=dtype)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    params = DcalParams(
        proj=normal(cfg.patch_dim, d),
        cls=zeros(1, d),
        pos=normal(cfg.num_patches + 1, d),
        blocks=[init_block(d, rng, dtype=dtype) for _ in range(cfg.depth)],
        norm=init_layer_norm(d, dtype),
        head_w=normal(d, c),
        head_b=zeros(c),
        loss_weights=zeros(len(BRANCHES)),
    )
    if cfg.glca_blocks:
        params.glca = init_block(d, rng, dtype=dtype)
        params.glca_norm = init_layer_norm(d, dtype)
        params.glca_head_w = normal(d, c)
        params.glca_head_b = zeros(c)
    return params


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class ForwardOutputs:
    logits_sa: Tensor
    cls_sa: Tensor
    attention: list[np.ndarray] = field(default_factory=list)  # head-averaged, per layer
    logits_glca: Tensor | None = None
    cls_glca: Tensor | None = None
    logits_pwca: Tensor | None = None
    cls_pwca: Tensor | None = None
    rollout: RolloutMap | None = None
    selection: LocalSelection | None = None

    def row(self, i: int) -> "ForwardOutputs":
        """Outputs for sample ``i`` of a batch (tensors stay on the graph)."""
        pick = lambda t: None if t is None else t[i]  # noqa: E731
        sel = self.selection
        return ForwardOutputs(
            logits_sa=pick(self.logits_sa),
            cls_sa=pick(self.cls_sa),
            attention=[a[i] for a in self.attention],
            logits_glca=pick(self.logits_glca),
            cls_glca=pick(self.cls_glca),
            logits_pwca=pick(self.logits_pwca),
            cls_pwca=pick(self.cls_pwca),
            rollout=None if self.rollout is None else RolloutMap(self.rollout.s_hat[i], self.rollout.layer_index),
            selection=None if sel is None else LocalSelection(sel.indices[i], sel.ratio, sel.responses[i]),
        )


def _final_cls(x: Tensor, norm: LayerNormParams) -> Tensor:
    return T.layer_norm(x[:, 0], norm.gamma, norm.beta)


def _as_batch(images, cfg: DcalConfig) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (cfg.image_height, cfg.image_width, cfg.channels)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"images of shape {arr.shape[1:]} do not match config {expected}")
    return arr


def embed_images(images: np.ndarray, cfg: DcalConfig, params: DcalParams) -> Tensor:
    pixels = (_as_batch(images, cfg) - PIXEL_MEAN) / PIXEL_STD
    patches = patchify_batch(pixels, cfg.patch_size).astype(params.proj.dtype)
    return embed_tokens(Tensor(patches, dtype=params.proj.dtype), params.proj, params.cls, params.pos)


def forward_batch(
    images: np.ndarray,
    cfg: DcalConfig,
    params: DcalParams,
    *,
    partner: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
    pwca_blocks: Sequence[EncoderBlockParams] | None = None,
    branches: Sequence[str] = BRANCHES,
) -> ForwardOutputs:
    """Run all branches on a batch of images (B, H, W, C).

    ``partner[i]`` names the distractor of sample ``i`` for the PWCA branch,
    which only runs when training with a partner map. The distractor's keys
    and values are taken from its own clean SA pass at the same depth.
    """
    heads = cfg.heads
    drops = drop_schedule(cfg.depth, cfg.drop_path_max) if training else [0.0] * cfg.depth
    rng = rng if training else None
    if pwca_blocks is None:
        pwca_blocks = params.blocks[: cfg.pwca_blocks]

    x0 = embed_images(images, cfg, params)
    x, maps, kvs, glca_in = x0, [], [], None
    for i, blk in enumerate(params.blocks):
        x, weights, kv = encoder_block(x, blk, heads, drops[i], rng, return_kv=True)
        maps.append(head_average(weights))
        kvs.append(kv)
        if i + 1 == cfg.glca_depth:
            glca_in = x
    cls_sa = _final_cls(x, params.norm)
    out = ForwardOutputs(logits_sa=cls_sa @ params.head_w + params.head_b, cls_sa=cls_sa, attention=maps)

    if cfg.glca_blocks and "glca" in branches:
        out.rollout = rollout(maps, cfg.glca_depth)
        out.selection = select_local_queries(cls_response(out.rollout), cfg.ratio)
        y = glca_block(glca_in, out.selection, params.glca, heads)
        out.cls_glca = _final_cls(y, params.glca_norm)
        out.logits_glca = out.cls_glca @ params.glca_head_w + params.glca_head_b

    if training and partner is not None and len(pwca_blocks) and "pwca" in branches:
        partner = np.asarray(partner)
        x1 = x0
        for i, blk in enumerate(params.blocks):
            if i < len(pwca_blocks):
                k2, v2 = (T.take(t, partner, axis=0) for t in kvs[i])
                x1 = pwca_block_kv(x1, (k2, v2), pwca_blocks[i], heads, drops[i], rng)
            else:
                x1, _ = encoder_block(x1, blk, heads, drops[i], rng)
        out.cls_pwca = _final_cls(x1, params.norm)
        out.logits_pwca = out.cls_pwca @ params.head_w + params.head_b
    return out


@dataclass
class PairBatch:
    first: ImageSample
    second: ImageSample


def forward_train(
    pair: PairBatch, cfg: DcalConfig, params: DcalParams, rng: np.random.Generator | None = None
) -> tuple[ForwardOutputs, ForwardOutputs]:
    """Both orderings of a pair: I1 with I2 as distractor, and vice versa."""
    cfg.validate()
    images = np.stack([pair.first.pixels, pair.second.pixels])
    out = forward_batch(images, cfg, params, partner=np.array([1, 0]), rng=rng, training=True)
    return out.row(0), out.row(1)


@dataclass
class Prediction:
    label: np.ndarray  # argmax of probs
    probs: np.ndarray  # summed branch probabilities for sa+glca
    logits_sa: np.ndarray | None = None
    logits_glca: np.ndarray | None = None
    feature: np.ndarray | None = None  # retrieval descriptor


def _softmax(logits: Tensor) -> np.ndarray:
    return T.row_softmax(logits).data


def infer_batch(images, cfg: DcalConfig, params: DcalParams, mode: str = "sa+glca") -> Prediction:
    """Inference without PWCA. Classification fuses by summing branch
    probabilities; retrieval concatenates the SA and GLCA class tokens."""
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}; expected one of {MODES}")
    if mode != "sa" and not cfg.glca_blocks:
        raise ValueError(f"mode {mode!r} needs a GLCA block but glca_blocks=0")
    with T.no_grad():
        out = forward_batch(images, cfg, params, branches=("sa",) if mode == "sa" else ("sa", "glca"))
    pred = Prediction(label=None, probs=None)
    probs = []
    feats = []
    if mode in ("sa", "sa+glca"):
        pred.logits_sa = out.logits_sa.data
        probs.append(_softmax(out.logits_sa))
        feats.append(out.cls_sa.data)
    if mode in ("glca", "sa+glca"):
        pred.logits_glca = out.logits_glca.data
        probs.append(_softmax(out.logits_glca))
        feats.append(out.cls_glca.data)
    pred.probs = probs[0] if len(probs) == 1 else probs[0] + probs[1]
    pred.label = np.argmax(pred.probs, axis=-1)
    if cfg.task == "retrieval":
        pred.feature = np.concatenate(feats, axis=-1)
    return pred


def forward_infer(img: ImageSample, cfg: DcalConfig, params: DcalParams, mode: str = "sa+glca") -> Prediction:
    pred = infer_batch(img.pixels[None], cfg, params, mode)
    return Prediction(
        label=int(pred.label[0]),
        probs=pred.probs[0],
        logits_sa=None if pred.logits_sa is None else pred.logits_sa[0],
        logits_glca=None if pred.logits_glca is None else pred.logits_glca[0],
        feature=None if pred.feature is None else pred.feature[0],
    )


class DcalModel:
    """Config + parameters, with the PWCA blocks held as aliases of SA blocks."""

    def __init__(self, cfg: DcalConfig, params: DcalParams, with_pwca: bool = True):
        self.cfg = cfg.validate()
        self.params = params
        self.pwca_blocks = list(params.blocks[: cfg.pwca_blocks]) if with_pwca else []

    def without_pwca(self) -> "DcalModel":
        return DcalModel(self.cfg, self.params, with_pwca=False)

    def forward(self, images, partner=None, rng=None, training=False) -> ForwardOutputs:
        return forward_batch(
            images, self.cfg, self.params, partner=partner, rng=rng, training=training,
            pwca_blocks=self.pwca_blocks,
        )

    def infer(self, images, mode: str = "sa+glca") -> Prediction:
        return infer_batch(images, self.cfg, self.params, mode)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label]; batch mean for 2-D logits."""
    num_classes = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes: {labels}")
    logp = T.log_softmax(logits)
    if logits.ndim == 1:
        return -logp[int(labels)]
    picked = logp[np.arange(logits.shape[0]), labels]
    return -T.mean(picked)


def pairwise_distances(features: Tensor) -> Tensor:
    """Euclidean distances; a 1e-12 floor under the root keeps the gradient finite."""
    b, f = features.shape
    diff = T.reshape(features, (b, 1, f)) - T.reshape(features, (1, b, f))
    return T.sqrt(T.sum(diff * diff, axis=-1) + 1e-12)


def triplet_loss(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss: per anchor, relu(max d(a,p) - min d(a,n) + margin),
    averaged over anchors that have both a positive and a negative."""
    labels = np.asarray(labels)
    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise ContractError("triplet loss needs an anchor with both a positive and a negative")
    d = dist.data
    hard_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    hard_neg = np.where(neg_mask, d, np.inf).argmin(axis=1)
    anchors = np.flatnonzero(valid)
    d_ap = dist[anchors, hard_pos[anchors]]
    d_an = dist[anchors, hard_neg[anchors]]
    return T.mean(T.relu(d_ap - d_an + margin))


def dynamic_loss(losses: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Uncertainty-style weighting: sum_k 0.5 * (exp(-w_k) * L_k + w_k)."""
    if len(losses) != weights.shape[0]:
        raise ValueError(f"{len(losses)} losses but {weights.shape[0]} loss weights")
    total = None
    for k, loss in enumerate(losses):
        w = weights[k]
        term = (T.exp(-w) * loss + w) * 0.5
        total = term if total is None else total + term
    return total


def branch_losses(out: ForwardOutputs, labels, cfg: DcalConfig) -> dict[str, Tensor]:
    """Per-branch supervised loss; retrieval adds batch-hard triplet on the class token."""
    pairs = [("sa", out.logits_sa, out.cls_sa), ("glca", out.logits_glca, out.cls_glca),
             ("pwca", out.logits_pwca, out.cls_pwca)]
    losses = {}
    for name, logits, feat in pairs:
        if logits is None:
            continue
        loss = cross_entropy(logits, labels)
        if cfg.task == "retrieval":
            loss = loss + triplet_loss(feat, labels, cfg.triplet_margin)
        losses[name] = loss
    return losses


def total_loss(out: ForwardOutputs, labels, cfg: DcalConfig, params: DcalParams):
    """Returns (combined loss, per-branch losses)."""
    losses = branch_losses(out, labels, cfg)
    idx = np.array([BRANCHES.index(k) for k in losses])
    return dynamic_loss(list(losses.values()), params.loss_weights[idx]), losses


__all__ = [
    "DcalConfig",
    "DcalParams",
    "DcalModel",
    "ForwardOutputs",
    "PairBatch",
    "Prediction",
    "branch_losses",
    "cross_entropy",
    "dynamic_loss",
    "forward_batch",
    "forward_infer",
    "forward_train",
    "infer_batch",
    "init_params",
    "param_shapes",
    "total_loss",
    "triplet_loss",
]
