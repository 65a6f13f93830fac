"""Counterfactual similarity and effect decomposition.

The factual branch scores every phrase representation against every region.
The counterfactual branch replaces all phrase representations by a single
learnable vector ``r`` while leaving regions untouched, so its rows are
identical. Their difference is the debiased similarity used downstream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass
class IciState:
    r: Tensor
    phrase_proj: Tensor
    region_proj: Tensor
    scale: float

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, identity: bool = False) -> "IciState":
        if identity:
            wp, wr = np.eye(d), np.eye(d)
        else:
            wp = rng.normal(scale=1.0 / math.sqrt(d), size=(d, d))
            wr = rng.normal(scale=1.0 / math.sqrt(d), size=(d, d))
        return cls(
            r=Tensor(np.zeros(d), requires_grad=True),
            phrase_proj=Tensor(wp, requires_grad=True),
            region_proj=Tensor(wr, requires_grad=True),
            scale=1.0 / math.sqrt(d),
        )

    @property
    def dim(self) -> int:
        return self.r.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("r", self.r), ("phrase_proj", self.phrase_proj), ("region_proj", self.region_proj)]


@dataclass
class EffectDecomposition:
    te: Tensor
    ede: Tensor
    eie: Tensor


def project_regions(region_reps: Tensor, head: IciState) -> Tensor:
    return nx.matmul(region_reps, head.region_proj)


def project_phrases(phrase_reps: Tensor, head: IciState) -> Tensor:
    return nx.matmul(phrase_reps, head.phrase_proj)


def similarity(phrase_reps: Tensor, region_reps: Tensor, head: IciState) -> Tensor:
    """Scaled dot product of projected phrases ``[.., n, d]`` and regions ``[.., m, d]``."""
    if phrase_reps.shape[-1] != head.dim or region_reps.shape[-1] != head.dim:
        raise ContractError(
            f"similarity dim mismatch: phrases {list(phrase_reps.shape)}, regions {list(region_reps.shape)}, "
            f"head dim {head.dim}")
    p = project_phrases(phrase_reps, head)
    r = project_regions(region_reps, head)
    return nx.scale(nx.matmul(p, nx.transpose(r)), head.scale)


def counterfactual_similarity(head: IciState, region_reps: Tensor, n: int, detach_r: bool = False) -> Tensor:
    """Similarity with every phrase replaced by ``r``; returns ``[.., n, m]``."""
    r = nx.stop_gradient(head.r) if detach_r else head.r
    lead = region_reps.shape[:-2]
    rows = nx.mul(np.ones(lead + (n, 1)), nx.reshape(r, (1,) * len(lead) + (1, head.dim)))
    return similarity(rows, region_reps, head)


def eie(te: Tensor, ede: Tensor) -> EffectDecomposition:
    """Subtract the counterfactual (direct) effect from the factual (total) one."""
    if te.shape != ede.shape:
        raise ContractError(f"te {list(te.shape)} and ede {list(ede.shape)} differ in shape")
    return EffectDecomposition(te=te, ede=ede, eie=nx.sub(te, ede))
