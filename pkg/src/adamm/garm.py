"""Graph-guided refinement of the student bottleneck.

Dense voxel features are softly assigned to a small set of learnable anchor
nodes (one graph for the generalization features, one for the fused adapter
features). The two graphs are scale-aligned, cross-propagated with a shared
graph convolution, linked through a thresholded cosine adjacency, aggregated
with single-head graph attention (pairwise, then jointly on the stacked
2K-node graph), reprojected to the voxel grid, and fused back into the
original features with 1x1x1 convolutions.

All functions here operate on single-case tensors: feature fields are
(C, d, h, w), node matrices (K, C), assignments (K, N).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class GraphNet3D(nn.Module):
    """K learnable anchors with strictly positive channel-wise bandwidths."""

    def __init__(self, num_anchors: int, channels: int):
        super().__init__()
        if num_anchors < 2:
            raise ValueError("need at least 2 anchors")
        self.anchors = nn.Parameter(torch.randn(num_anchors, channels))
        # Bandwidths are exponentials of free parameters, so sigma > 0 always.
        self.log_bandwidth = nn.Parameter(torch.zeros(num_anchors, channels))

    @property
    def bandwidths(self) -> torch.Tensor:
        return torch.exp(self.log_bandwidth)

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]


@dataclass
class GraphRep:
    """Node features G (K, C) and the column-stochastic soft assignment P (K, N)."""

    nodes: torch.Tensor
    assign: torch.Tensor
    grid: tuple


def soft_assign(features: torch.Tensor, net: GraphNet3D) -> GraphRep:
    """Gaussian-kernel soft assignment of each voxel to the anchors.

    P[k, i] is the softmax over k of -||(f_i - mu_k) / sigma_k||^2 / 2; every
    column of P sums to 1.
    """
    if features.ndim != 4:
        raise ValueError(f"expected (C, d, h, w) features, got {tuple(features.shape)}")
    channels = features.shape[0]
    if channels != net.anchors.shape[1]:
        raise ValueError(
            f"feature channels {channels} != anchor dimension {net.anchors.shape[1]}"
        )
    grid = tuple(features.shape[1:])
    flat = features.reshape(channels, -1)  # (C, N)
    inv_sigma = torch.exp(-net.log_bandwidth)  # (K, C)
    diff = flat.T.unsqueeze(0) - net.anchors.unsqueeze(1)  # (K, N, C)
    sq = ((diff * inv_sigma.unsqueeze(1)) ** 2).sum(-1)  # (K, N)
    assign = torch.softmax(-0.5 * sq, dim=0)
    return GraphRep(nodes=net.anchors, assign=assign, grid=grid)


def scale_align(nodes: torch.Tensor, matrix: torch.Tensor) -> torch.Tensor:
    """Apply one channel-space linear map to every node vector."""
    return nodes @ matrix.T


def cross_gcn(nodes_g: torch.Tensor, nodes_c: torch.Tensor, transform):
    """Propagate both node sets along the dense similarity adjacency.

    E = G_g G_c^T; each graph convolution linearly transforms its node
    features and aggregates them with the row-softmax of E.

    Returns (G'_g, G'_c, E).
    """
    if nodes_g.shape != nodes_c.shape:
        raise ValueError(f"node shape mismatch: {tuple(nodes_g.shape)} vs {tuple(nodes_c.shape)}")
    adjacency = nodes_g @ nodes_c.T
    weights = torch.softmax(adjacency, dim=1)
    out_g = weights @ transform(nodes_g)
    out_c = weights @ transform(nodes_c)
    return out_g, out_c, adjacency


def threshold_adjacency(nodes_g: torch.Tensor, nodes_c: torch.Tensor, tau: float = 0.8):
    """Binary cross-graph adjacency from thresholded cosine similarity.

    A[p, q] = 1 when cos(g_p, c_q) > tau; A' = (A + A^T) / 2 with entries in
    {0, 0.5, 1}. Zero-norm node vectors get similarity 0 and a warning.
    """
    if not -1.0 < tau < 1.0:
        raise ValueError(f"tau must be in (-1, 1), got {tau}")
    norm_g = nodes_g.norm(dim=1, keepdim=True)
    norm_c = nodes_c.norm(dim=1, keepdim=True)
    if (norm_g == 0).any() or (norm_c == 0).any():
        warnings.warn("zero-norm node vector: treating its similarities as 0", RuntimeWarning)
    unit_g = torch.where(norm_g > 0, nodes_g / norm_g.clamp_min(1e-30), torch.zeros_like(nodes_g))
    unit_c = torch.where(norm_c > 0, nodes_c / norm_c.clamp_min(1e-30), torch.zeros_like(nodes_c))
    sim = unit_g @ unit_c.T
    adj = (sim > tau).to(nodes_g.dtype)
    sym = (adj + adj.T) / 2
    return adj, sym


class GATLayer(nn.Module):
    """Single-head graph attention with leaky-rectifier pair scoring.

    Edge weights act multiplicatively on the pre-softmax attention (a
    half-weight edge contributes at a log(1/2) logit offset); nodes without
    neighbors fall back to a self-loop.
    """

    def __init__(self, channels: int, negative_slope: float = 0.2):
        super().__init__()
        self.transform = nn.Linear(channels, channels, bias=False)
        self.attn_src = nn.Parameter(torch.empty(channels))
        self.attn_dst = nn.Parameter(torch.empty(channels))
        nn.init.normal_(self.attn_src, std=channels**-0.5)
        nn.init.normal_(self.attn_dst, std=channels**-0.5)
        self.negative_slope = negative_slope

    def forward(self, nodes: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        if adjacency.shape != (nodes.shape[0], nodes.shape[0]):
            raise ValueError("adjacency must be K x K for K nodes")
        h = self.transform(nodes)
        scores = F.leaky_relu(
            (h * self.attn_src).sum(-1).unsqueeze(1) + (h * self.attn_dst).sum(-1).unsqueeze(0),
            self.negative_slope,
        )
        adj = adjacency.clone()
        isolated = adj.sum(dim=1) == 0
        if isolated.any():
            idx = torch.nonzero(isolated, as_tuple=True)[0]
            adj[idx, idx] = 1.0
        masked = torch.where(
            adj > 0, scores + torch.log(adj.clamp_min(1e-30)), torch.full_like(scores, float("-inf"))
        )
        attn = torch.softmax(masked, dim=1)
        return F.elu(attn @ h)

    def attention_weights(self, nodes: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        """The row-stochastic attention matrix, for inspection in tests."""
        h = self.transform(nodes)
        scores = F.leaky_relu(
            (h * self.attn_src).sum(-1).unsqueeze(1) + (h * self.attn_dst).sum(-1).unsqueeze(0),
            self.negative_slope,
        )
        adj = adjacency.clone()
        isolated = adj.sum(dim=1) == 0
        if isolated.any():
            idx = torch.nonzero(isolated, as_tuple=True)[0]
            adj[idx, idx] = 1.0
        masked = torch.where(
            adj > 0, scores + torch.log(adj.clamp_min(1e-30)), torch.full_like(scores, float("-inf"))
        )
        return torch.softmax(masked, dim=1)


def gat_aggregate(nodes: torch.Tensor, adjacency: torch.Tensor, layer: GATLayer) -> torch.Tensor:
    """Aggregate node features with masked single-head attention."""
    return layer(nodes, adjacency)


def build_joint_adjacency(adj: torch.Tensor, adj_sym: torch.Tensor):
    """Stack the cross-graph adjacencies into the 2K x 2K joint structure.

    A'' = [[A, A'], [A', A^T]]; A''' = (A'' + A''^T) / 2 is exactly symmetric.
    """
    top = torch.cat([adj, adj_sym], dim=1)
    bottom = torch.cat([adj_sym, adj.T], dim=1)
    joint = torch.cat([top, bottom], dim=0)
    return joint, (joint + joint.T) / 2


def joint_aggregate(nodes_g: torch.Tensor, nodes_c: torch.Tensor, adj: torch.Tensor,
                    adj_sym: torch.Tensor, layer: GATLayer):
    """Attention over the concatenated 2K nodes under the symmetrized joint graph."""
    k = nodes_g.shape[0]
    _, joint_sym = build_joint_adjacency(adj, adj_sym)
    merged = layer(torch.cat([nodes_g, nodes_c], dim=0), joint_sym)
    return merged[:k], merged[k:]


def reproject(nodes_c: torch.Tensor, assign_g: torch.Tensor, assign_c: torch.Tensor,
              grid=None) -> torch.Tensor:
    """Project refined nodes back to the dense grid through blended assignments.

    The two assignment matrices are stacked (2K rows), softmaxed per voxel
    into blending weights, recombined as P_g*w_g + P_c*w_c, and contracted
    against the node features.
    """
    if assign_g.shape != assign_c.shape:
        raise ValueError("assignment shapes must match")
    k = assign_g.shape[0]
    stacked = torch.cat([assign_c, assign_g], dim=0)
    weights = torch.softmax(stacked, dim=0)
    blended = assign_g * weights[k:] + assign_c * weights[:k]
    dense = nodes_c.T @ blended  # (C, N)
    if grid is not None:
        dense = dense.reshape(nodes_c.shape[1], *grid)
    return dense


class RefineFuse(nn.Module):
    """Residual fusion of the reprojected field with the original features.

    out = conv2(conv1(F) + conv0(F_g + F_c)) with 1x1x1 convolutions.
    Initialized as a pass-through (conv0 and conv2 identity, conv1 zero) so
    an untrained refinement leaves the bottleneck unchanged.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv0 = nn.Conv3d(channels, channels, kernel_size=1)
        self.conv1 = nn.Conv3d(channels, channels, kernel_size=1)
        self.conv2 = nn.Conv3d(channels, channels, kernel_size=1)
        with torch.no_grad():
            eye = torch.eye(channels).reshape(channels, channels, 1, 1, 1)
            self.conv0.weight.copy_(eye)
            self.conv2.weight.copy_(eye)
            nn.init.zeros_(self.conv0.bias)
            nn.init.zeros_(self.conv1.weight)
            nn.init.zeros_(self.conv1.bias)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, reprojected, feat_g, feat_c):
        return self.conv2(self.conv1(reprojected) + self.conv0(feat_g + feat_c))


class GarmModule(nn.Module):
    """Full refinement pipeline over (generalization, combination) features."""

    def __init__(self, channels: int, num_anchors: int = 8, tau: float = 0.8):
        super().__init__()
        self.graph_g = GraphNet3D(num_anchors, channels)
        self.graph_c = GraphNet3D(num_anchors, channels)
        self.scale = nn.Linear(channels, channels, bias=False)
        self.gcn = nn.Linear(channels, channels, bias=False)
        self.gat_pair = GATLayer(channels)
        self.gat_joint = GATLayer(channels)
        self.refine = RefineFuse(channels)
        self.tau = tau

    def forward_single(self, feat_g: torch.Tensor, feat_c: torch.Tensor) -> torch.Tensor:
        rep_g = soft_assign(feat_g, self.graph_g)
        rep_c = soft_assign(feat_c, self.graph_c)
        aligned_c = scale_align(rep_c.nodes, self.scale.weight)
        prop_g, prop_c, _ = cross_gcn(rep_g.nodes, aligned_c, self.gcn)
        adj, adj_sym = threshold_adjacency(prop_g, prop_c, self.tau)
        agg_g = gat_aggregate(prop_g, adj, self.gat_pair)
        agg_c = gat_aggregate(prop_c, adj, self.gat_pair)
        joint_g, joint_c = joint_aggregate(agg_g, agg_c, adj, adj_sym, self.gat_joint)
        dense = reproject(joint_c, rep_g.assign, rep_c.assign, grid=rep_g.grid)
        return self.refine(
            dense.unsqueeze(0), feat_g.unsqueeze(0), feat_c.unsqueeze(0)
        ).squeeze(0)

    def forward(self, feat_g: torch.Tensor, feat_c: torch.Tensor) -> torch.Tensor:
        """Refine batched (B, C, d, h, w) bottleneck features."""
        if feat_g.shape != feat_c.shape:
            raise ValueError("generalization/combination feature shapes must match")
        return torch.stack(
            [self.forward_single(feat_g[b], feat_c[b]) for b in range(feat_g.shape[0])]
        )
