"""Weakly-supervised optimisation from sentence-image pair labels only."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .ida import MASK_VALUE, GlobalDictionary, IdaLayerParams
from .ici import IciState
from .model import ABLATIONS, Batch, IeciModel, ModelConfig
from .numerics import ContractError, Tensor

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"IECICKPT"
CKPT_VERSION = 1


class NumericalError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    alpha: float = 0.1
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    ablation: str = "full"
    symmetric: bool = False
    d_model: int = 32
    layers: int = 6
    heads: int = 4
    dict_size: int = 32

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("learning_rate must be > 0, weight_decay >= 0, epochs >= 0")
        if self.layers < 0 or self.heads < 1 or self.dict_size < 1:
            raise ValueError("layers must be >= 0, heads >= 1, dict_size >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, d_p: int, d_r: int) -> ModelConfig:
        return ModelConfig(d_p=d_p, d_r=d_r, d_model=self.d_model, layers=self.layers, heads=self.heads,
                           dict_size=self.dict_size, ablation=self.ablation, seed=self.seed)


# --- losses -------------------------------------------------------------------

def sentence_image_similarity(a: Tensor) -> Tensor:
    """Mean over phrases of the best region score."""
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ContractError(f"need a non-empty [n, m] matrix, got shape {list(a.shape)}")
    best, _ = nx.reduce_max(a, axis=1)
    return nx.mean(best)


@dataclass
class BatchSimilarity:
    matrix: Tensor
    targets: np.ndarray
    predicted: np.ndarray


def batch_similarity(batch: Batch, model: IeciModel) -> BatchSimilarity:
    if batch.size < 2:
        raise ContractError(f"batch_similarity needs T >= 2 pairs, got {batch.size}")
    a = model.forward(batch).sentence_image
    return BatchSimilarity(a, np.arange(batch.size), a.data.argmax(axis=1))


def wpg_loss(a_tt: Tensor, symmetric: bool = False) -> Tensor:
    """Row-wise softmax cross-entropy with the diagonal as target."""
    if a_tt.ndim != 2 or a_tt.shape[0] != a_tt.shape[1] or a_tt.shape[0] < 2:
        raise ContractError(f"need a square [T, T] matrix with T >= 2, got {list(a_tt.shape)}")
    t = a_tt.shape[0]
    eye = np.eye(t)
    loss = nx.scale(nx.sum(nx.mul(nx.log_softmax(a_tt, axis=1), eye)), -1.0 / t)
    if symmetric:
        cols = nx.scale(nx.sum(nx.mul(nx.log_softmax(a_tt, axis=0), eye)), -1.0 / t)
        loss = nx.scale(nx.add(loss, cols), 0.5)
    return loss


def kl_loss(factual: Tensor, counterfactual: Tensor, phrase_mask: Optional[np.ndarray] = None,
            region_mask: Optional[np.ndarray] = None, detach_p: bool = True) -> Tensor:
    """KL(p || q) per phrase, averaged over phrases and then over pairs.

    ``p`` is the row softmax of the factual scores (a constant unless
    ``detach_p`` is off), ``q`` that of the counterfactual scores. Inputs are
    ``[n, m]`` or ``[B, n, m]``; the counterfactual may have a single
    broadcast row.
    """
    f = nx.stop_gradient(factual) if detach_p else factual
    cf = counterfactual
    if region_mask is not None:
        bias = np.where(region_mask, 0.0, MASK_VALUE)[:, None, :]
        f = nx.add(f, bias)
        cf = nx.add(cf, bias)
    logp = nx.log_softmax(f, axis=-1)
    p = nx.exp(logp)
    logq = nx.log_softmax(cf, axis=-1)
    per_row = nx.sum(nx.mul(p, nx.sub(logp, logq)), axis=-1)       # [..., n]
    if per_row.ndim == 1:
        return nx.mean(per_row)
    if phrase_mask is None:
        phrase_mask = np.ones(per_row.shape, dtype=bool)
    w = phrase_mask / phrase_mask.sum(axis=-1, keepdims=True) / per_row.shape[0]
    return nx.sum(nx.mul(per_row, w))


def total_loss(wpg: Tensor, kl: Tensor, alpha: float) -> Tensor:
    return nx.add(wpg, nx.scale(kl, alpha))


# --- optimiser ----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; parameters without a gradient are left alone."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.data
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)


# --- loop ---------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    wpg: float
    kl: Optional[float]
    total: float


@dataclass
class TrainResult:
    model: IeciModel
    history: list = field(default_factory=list)
    config: Optional[TrainConfig] = None


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into batches; a lone leftover joins the previous batch."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def compute_losses(model: IeciModel, batch: Batch, cfg: TrainConfig,
                   stop_grads: bool = True) -> tuple[Tensor, Optional[Tensor], Tensor]:
    """``(wpg, kl, total)`` for one batch.

    ``stop_grads`` applies the two training-time gradient blocks: ``r`` is a
    constant inside the debiased scores and the KL reference ``p`` is a
    constant. Switching them off gives the plain loss function, which is
    what finite differences measure.
    """
    out = model.forward(batch, block_r=stop_grads)
    wpg = wpg_loss(out.sentence_image, cfg.symmetric)
    if out.matched_cf is None:
        return wpg, None, wpg
    kl = kl_loss(out.matched_te, out.matched_cf, out.phrase_mask, out.region_mask, detach_p=stop_grads)
    return wpg, kl, total_loss(wpg, kl, cfg.alpha)


def train(corpus, cfg: TrainConfig, model: Optional[IeciModel] = None,
          on_step: Optional[Callable[[StepRecord], None]] = None) -> TrainResult:
    cfg.check()
    samples = corpus.splits["train"]
    if len(samples) < 2:
        raise ValueError(f"need at least 2 training pairs, got {len(samples)}")
    if model is None:
        model = IeciModel.build(cfg.model_config(corpus.d_p, corpus.d_r), samples)
    opt = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[StepRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(len(samples), cfg.batch_size, rng):
            batch = Batch.from_samples([samples[i] for i in idx])
            wpg, kl, total = compute_losses(model, batch, cfg)
            if not math.isfinite(total.item()):
                raise NumericalError(step, "loss")
            opt.zero_grad()
            nx.backward(total)
            opt.step()
            rec = StepRecord(step, epoch, wpg.item(), None if kl is None else kl.item(), total.item())
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        logger.debug("epoch %d done, last loss %.6f", epoch, history[-1].total if history else float("nan"))
    return TrainResult(model, history, cfg)


def history_csv(history: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "wpg", "kl", "total"])
    for r in history:
        w.writerow([r.step, r.epoch, repr(r.wpg), "" if r.kl is None else repr(r.kl), repr(r.total)])
    return buf.getvalue()


# --- gradient check on a toy model --------------------------------------------

@dataclass
class GradcheckResult:
    max_rel_error: float
    per_param: dict
    eps: float


def toy_gradcheck(n_phrases: int = 2, n_regions: int = 3, dim: int = 8, layers: int = 2, dict_size: int = 4,
                  pairs: int = 3, heads: int = 4, seed: int = 0, eps: float = 1e-5,
                  ablation: str = "full") -> GradcheckResult:
    """Finite-difference check of the total loss against every model parameter.

    Parameters are jittered away from their structured initial values
    (identity maps, zero ``r``) so the check runs at a generic point. The
    training-time gradient blocks are off, so every path is checked.
    """
    from .corpus import SynthConfig, synth_generate

    corpus = synth_generate(SynthConfig(train_pairs=pairs, test_pairs=0, n_phrases=n_phrases,
                                        n_regions=n_regions, dim=dim, implicit_fraction=0.5, seed=seed))
    cfg = TrainConfig(d_model=dim, layers=layers, heads=heads, dict_size=dict_size, batch_size=pairs,
                      seed=seed, ablation=ablation)
    samples = corpus.splits["train"]
    model = IeciModel.build(cfg.model_config(dim, dim), samples)
    rng = np.random.default_rng(seed + 1)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    batch = Batch.from_samples(samples)

    def loss() -> Tensor:
        return compute_losses(model, batch, cfg, stop_grads=False)[2]

    per_param = nx.gradcheck_params(loss, [p for _, p in model.named_parameters()], eps, per_param=True)
    per_param = dict(zip([name for name, _ in model.named_parameters()], per_param))
    return GradcheckResult(max(per_param.values()), per_param, eps)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: IeciModel, cfg: Optional[TrainConfig] = None) -> Path:
    """Versioned binary: header, config JSON echo, then named float32 tensors."""
    path = Path(path)
    echo = json.dumps({"model": model.cfg.to_dict(), "train": None if cfg is None else cfg.to_dict()},
                      sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(echo)), echo, struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<II", len(raw), p.ndim) + raw)
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path) -> tuple[IeciModel, Optional[TrainConfig]]:
    buf = Path(path).read_bytes()
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    version, echo_len = struct.unpack_from("<II", buf, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    echo = json.loads(buf[off:off + echo_len].decode("utf-8"))
    off += echo_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<II", buf, off)
        off += 8
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 4 * size
    mcfg = ModelConfig(**echo["model"])
    model = skeleton_model(mcfg, state)
    model.load_state(state)
    tcfg = None if echo["train"] is None else TrainConfig.from_dict(echo["train"])
    return model, tcfg


def skeleton_model(cfg: ModelConfig, state: dict) -> IeciModel:
    """Allocate a model with the parameter shapes found in ``state``."""
    rng = np.random.default_rng(0)
    d = cfg.d_model

    def t(name):
        return Tensor(np.zeros(state[name].shape), requires_grad=True)

    layers = {tag: [IdaLayerParams.init(d, cfg.heads, rng) for _ in range(cfg.layers)]
              for tag in ("phrase", "region")}
    dicts = {tag: GlobalDictionary(t(f"{tag}_dict.keys"), t(f"{tag}_dict.values"), tag + "s")
             for tag in ("phrase", "region")}
    head = IciState.init(d, rng)
    return IeciModel(cfg, t("phrase_in"), t("phrase_in_bias"), t("region_in"), t("region_in_bias"),
                     layers["phrase"], layers["region"], dicts["phrase"], dicts["region"], head)
