"""Object relational graph encoder.

Objects are projected to a common width, a relation matrix is formed from
two affine views of the nodes, optionally sparsified to each node's top-k
neighbours, row-normalised with a softmax, and used for one linear graph
convolution. P-ORG builds one graph per frame (parameters shared across
frames); C-ORG builds a single graph over every object in the video.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .nn_substrate import ParameterStore, glorot_uniform, linear_forward, softmax_stable

P_ORG, C_ORG = "p_org", "c_org"


@dataclass(frozen=True)
class OrgConfig:
    mode: str = C_ORG
    top_k: int | None = 5  # None means connect to all nodes
    d: int = 512

    def __post_init__(self):
        if self.mode not in (P_ORG, C_ORG):
            raise ConfigError(f"org mode must be {P_ORG!r} or {C_ORG!r}, got {self.mode!r}")
        if self.top_k is not None and self.top_k <= 0:
            raise ConfigError("top_k must be positive or 'all'")
        if self.d <= 0:
            raise ConfigError("org dim must be positive")


@dataclass
class RelationalGraph:
    A: torch.Tensor  # [..., K, K] raw coefficients
    A_hat: torch.Tensor  # [..., K, K] row-normalised
    mask: torch.Tensor  # [..., K, K] bool

    @property
    def K(self) -> int:
        return self.A.shape[-1]


def init_org(store: ParameterStore, d_obj: int, d: int, rng: np.random.Generator, prefix: str = "org") -> None:
    store.add(f"{prefix}.W_o", glorot_uniform(rng, d_obj, d))
    store.add(f"{prefix}.b_o", np.zeros(d))
    # b_i and b_j both live in the projection width (d' = d).
    store.add(f"{prefix}.W_i", glorot_uniform(rng, d, d))
    store.add(f"{prefix}.b_i", np.zeros(d))
    store.add(f"{prefix}.W_j", glorot_uniform(rng, d, d))
    store.add(f"{prefix}.b_j", np.zeros(d))
    store.add(f"{prefix}.W_r", glorot_uniform(rng, d, d))


def relation_coefficients(R, W_i, b_i, W_j, b_j) -> torch.Tensor:
    """A[p, q] = <phi(R)[p], psi(R)[q]> for the affine maps phi, psi."""
    R = torch.as_tensor(R)
    if R.shape[-2] < 1:
        raise ShapeError("relation graph needs at least one node")
    phi = linear_forward(R, W_i, b_i)
    psi = linear_forward(R, W_j, b_j)
    return phi @ psi.transpose(-1, -2)


def topk_mask(A, k: int | None, keep_self: bool = True) -> torch.Tensor:
    """Boolean mask keeping the k largest coefficients per row.

    Ties go to the lower column index. With keep_self the diagonal is always
    kept and counts against the budget of k.
    """
    A = torch.as_tensor(A).detach()
    K = A.shape[-1]
    if k is None:
        return torch.ones(A.shape, dtype=torch.bool)
    if k <= 0:
        raise ConfigError("top_k must be positive")
    if k > K:
        raise ConfigError(f"top_k={k} exceeds node count {K}")
    scores = A.clone()
    if keep_self:
        scores.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    mask = torch.zeros(A.shape, dtype=torch.bool)
    mask.scatter_(-1, order[..., :k], True)
    return mask


def normalize_graph(A, mask) -> torch.Tensor:
    return softmax_stable(A, mask, dim=-1)


def gcn_update(A_hat, R, W_r) -> torch.Tensor:
    A_hat, R, W_r = torch.as_tensor(A_hat), torch.as_tensor(R), torch.as_tensor(W_r)
    K = R.shape[-2]
    if A_hat.shape[-2:] != (K, K):
        raise ShapeError(f"graph {tuple(A_hat.shape[-2:])} vs {K} nodes")
    if W_r.shape != (R.shape[-1], R.shape[-1]):
        raise ShapeError(f"W_r {tuple(W_r.shape)} vs node width {R.shape[-1]}")
    return A_hat @ R @ W_r


def build_graph(R: torch.Tensor, top_k: int | None, params: ParameterStore, prefix: str = "org") -> RelationalGraph:
    A = relation_coefficients(R, params[f"{prefix}.W_i"], params[f"{prefix}.b_i"],
                              params[f"{prefix}.W_j"], params[f"{prefix}.b_j"])
    mask = topk_mask(A, top_k)
    return RelationalGraph(A, normalize_graph(A, mask), mask)


def project_objects(objects, params: ParameterStore, prefix: str = "org") -> torch.Tensor:
    return linear_forward(torch.as_tensor(objects, dtype=params.dtype),
                          params[f"{prefix}.W_o"], params[f"{prefix}.b_o"])


def encode_objects(objects, cfg: OrgConfig, params: ParameterStore, prefix: str = "org",
                   return_graph: bool = False):
    """Enhanced object features [..., L, N, d] from raw objects [..., L, N, d_o]."""
    R = project_objects(objects, params, prefix)
    L, N, d = R.shape[-3:]
    if cfg.mode == P_ORG:
        graph = build_graph(R, None, params, prefix)  # batched over frames
        out = gcn_update(graph.A_hat, R, params[f"{prefix}.W_r"])
    else:
        if cfg.top_k is not None and cfg.top_k > N * L:
            raise ConfigError(f"top_k={cfg.top_k} exceeds N*L={N * L}")
        flat = R.reshape(*R.shape[:-3], L * N, d)
        graph = build_graph(flat, cfg.top_k, params, prefix)
        out = gcn_update(graph.A_hat, flat, params[f"{prefix}.W_r"]).reshape(R.shape)
    return (out, graph) if return_graph else out
