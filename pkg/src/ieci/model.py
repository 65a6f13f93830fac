"""The full grounding model: input projections, two IDA stacks, ICI head."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .ici import IciState, counterfactual_similarity, eie, similarity
from .ida import MASK_VALUE, GlobalDictionary, IdaLayerParams, build_dictionary, ida_forward
from .numerics import Tensor

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_ida", "no_ici", "no_both")


@dataclass
class ModelConfig:
    d_p: int
    d_r: int
    d_model: int = 32
    layers: int = 6
    heads: int = 4
    dict_size: int = 32
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def uses_ida(self) -> bool:
        return self.ablation in ("full", "no_ici")

    @property
    def uses_ici(self) -> bool:
        return self.ablation in ("full", "no_ida")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    pair_ids: list
    phrases: np.ndarray        # [B, n, d_p], zero padded
    phrase_mask: np.ndarray    # [B, n] bool
    regions: np.ndarray        # [B, m, d_r]
    region_mask: np.ndarray    # [B, m] bool
    samples: list

    @classmethod
    def from_samples(cls, samples: Sequence) -> "Batch":
        b = len(samples)
        n = max(s.n for s in samples)
        m = max(s.m for s in samples)
        d_p = samples[0].phrase_features.shape[1]
        d_r = samples[0].region_features.shape[1]
        phrases = np.zeros((b, n, d_p))
        regions = np.zeros((b, m, d_r))
        pmask = np.zeros((b, n), dtype=bool)
        rmask = np.zeros((b, m), dtype=bool)
        for i, s in enumerate(samples):
            phrases[i, :s.n] = s.phrase_features
            regions[i, :s.m] = s.region_features
            pmask[i, :s.n] = True
            rmask[i, :s.m] = True
        return cls([s.pair_id for s in samples], phrases, pmask, regions, rmask, list(samples))

    @property
    def size(self) -> int:
        return len(self.pair_ids)


@dataclass
class ForwardResult:
    sentence_image: Tensor      # [B, B], row i = sentence i against every image
    matched_te: Tensor          # [B, n, m] factual scores of each sentence against its own image
    matched_cf: Optional[Tensor]  # [B, 1, m] counterfactual scores (grad flows to r)
    phrase_mask: np.ndarray
    region_mask: np.ndarray


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)


class IeciModel:
    def __init__(self, cfg: ModelConfig, phrase_in: Tensor, phrase_in_bias: Tensor, region_in: Tensor,
                 region_in_bias: Tensor, phrase_layers: list, region_layers: list,
                 phrase_dict: GlobalDictionary, region_dict: GlobalDictionary, head: IciState):
        self.cfg = cfg
        self.phrase_in = phrase_in
        self.phrase_in_bias = phrase_in_bias
        self.region_in = region_in
        self.region_in_bias = region_in_bias
        self.phrase_layers = phrase_layers
        self.region_layers = region_layers
        self.phrase_dict = phrase_dict
        self.region_dict = region_dict
        self.head = head

    @classmethod
    def build(cls, cfg: ModelConfig, train_samples: Sequence) -> "IeciModel":
        """Initialise parameters and cluster the projected training features into codebooks.

        Every ablation allocates the same parameters in the same order, so one
        seed gives identical shared weights across ablations.
        """
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        phrase_in, region_in = _dense(rng, cfg.d_p, d), _dense(rng, cfg.d_r, d)
        phrase_in_bias = Tensor(np.zeros(d), requires_grad=True)
        region_in_bias = Tensor(np.zeros(d), requires_grad=True)
        phrase_layers = [IdaLayerParams.init(d, cfg.heads, rng) for _ in range(cfg.layers)]
        region_layers = [IdaLayerParams.init(d, cfg.heads, rng) for _ in range(cfg.layers)]
        head = IciState.init(d, rng)

        pooled_p = np.concatenate([s.phrase_features for s in train_samples]) @ phrase_in.data
        pooled_r = np.concatenate([s.region_features for s in train_samples]) @ region_in.data
        k = min(cfg.dict_size, len(pooled_p), len(pooled_r))
        if k != cfg.dict_size:
            logger.warning("codebook size reduced from %d to %d (too few training tokens)", cfg.dict_size, k)
            cfg = replace(cfg, dict_size=k)
        phrase_dict = build_dictionary(pooled_p, k, seed=cfg.seed, source="phrases")
        region_dict = build_dictionary(pooled_r, k, seed=cfg.seed + 1, source="regions")
        return cls(cfg, phrase_in, phrase_in_bias, region_in, region_in_bias,
                   phrase_layers, region_layers, phrase_dict, region_dict, head)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("phrase_in", self.phrase_in), ("phrase_in_bias", self.phrase_in_bias),
               ("region_in", self.region_in), ("region_in_bias", self.region_in_bias)]
        for tag, layers in (("phrase", self.phrase_layers), ("region", self.region_layers)):
            for i, layer in enumerate(layers):
                out += [(f"{tag}_ida.{i}.{n}", p) for n, p in layer.named_parameters()]
        out += [("phrase_dict.keys", self.phrase_dict.keys), ("phrase_dict.values", self.phrase_dict.values),
                ("region_dict.keys", self.region_dict.keys), ("region_dict.values", self.region_dict.values)]
        out += [(f"ici.{n}", p) for n, p in self.head.named_parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def load_state(self, state: dict) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {list(arr.shape)} != {list(p.shape)}")
            p.data = arr.copy()

    # -- forward ---------------------------------------------------------------

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor]:
        """Token representations ``[B, n, d]`` for phrases and ``[B, m, d]`` for regions."""
        p = nx.add(nx.matmul(Tensor(batch.phrases), self.phrase_in), self.phrase_in_bias)
        r = nx.add(nx.matmul(Tensor(batch.regions), self.region_in), self.region_in_bias)
        bypass = not self.cfg.uses_ida
        p = ida_forward(p, self.phrase_layers, self.phrase_dict, batch.phrase_mask, bypass=bypass)
        r = ida_forward(r, self.region_layers, self.region_dict, batch.region_mask, bypass=bypass)
        return p, r

    def forward(self, batch: Batch, block_r: bool = True) -> ForwardResult:
        """Sentence-image scores plus the matched-pair pieces the KL term needs.

        With ``block_r`` the debiased scores see ``r`` as a constant, so only
        the KL term moves it.
        """
        p, r = self.encode(batch)
        b, n, d = p.shape
        m = r.shape[1]
        flat_p = nx.reshape(p, (b * n, d))
        flat_r = nx.reshape(r, (b * m, d))
        scores = similarity(flat_p, flat_r, self.head)                     # [B*n, B*m]
        if self.cfg.uses_ici:
            ede = counterfactual_similarity(self.head, flat_r, b * n, detach_r=block_r)
            scores = eie(scores, ede).eie
        scores = nx.reshape(scores, (b, n, b, m))
        region_bias = np.where(batch.region_mask, 0.0, MASK_VALUE)[None, None, :, :]
        best, _ = nx.reduce_max(nx.add(scores, region_bias), axis=3)        # [B, n, B]
        weights = batch.phrase_mask / batch.phrase_mask.sum(axis=1, keepdims=True)
        sent_img = nx.sum(nx.mul(best, weights[:, :, None]), axis=1)        # [B, B]

        matched_te = similarity(p, r, self.head)                            # [B, n, m]
        matched_cf = counterfactual_similarity(self.head, r, 1) if self.cfg.uses_ici else None
        return ForwardResult(sent_img, matched_te, matched_cf, batch.phrase_mask, batch.region_mask)

    def grounding_scores(self, batch: Batch) -> np.ndarray:
        """Per-phrase region scores ``[B, n, m]`` for each pair's own image."""
        p, r = self.encode(batch)
        te = similarity(p, r, self.head)
        if not self.cfg.uses_ici:
            return te.data
        ede = counterfactual_similarity(self.head, r, p.shape[1])
        return eie(te, ede).eie.data
