"""Step through the graph refinement: assignment, adjacency, reprojection.

Run:  python3 demos/03_graph_refinement.py
"""

import torch

from adamm import GarmModule, GraphNet3D, soft_assign
from adamm.garm import (
    build_joint_adjacency,
    cross_gcn,
    reproject,
    scale_align,
    threshold_adjacency,
)

torch.manual_seed(1)
channels, anchors = 8, 4

# ----------------------------------------------------------------------------
# Stage 0: each voxel of a dense feature field soft-assigns to K learnable
# anchors through a Gaussian kernel with channel-wise bandwidths. Columns of
# the assignment matrix are probability distributions over the anchors.
# ----------------------------------------------------------------------------
net_g = GraphNet3D(anchors, channels)
net_c = GraphNet3D(anchors, channels)
feat_g = torch.randn(channels, 3, 3, 3)
feat_c = torch.randn(channels, 3, 3, 3)

rep_g = soft_assign(feat_g, net_g)
rep_c = soft_assign(feat_c, net_c)
print("assignment:", tuple(rep_g.assign.shape), "column sums:",
      rep_g.assign.sum(0).min().item(), "..", rep_g.assign.sum(0).max().item())

# ----------------------------------------------------------------------------
# Stage 1: scale-align the combination graph, then propagate both node sets
# along the dense similarity adjacency with a shared graph convolution.
# ----------------------------------------------------------------------------
w_scale = torch.nn.Linear(channels, channels, bias=False)
aligned_c = scale_align(rep_c.nodes, w_scale.weight)
prop_g, prop_c, similarity = cross_gcn(rep_g.nodes, aligned_c, torch.nn.Linear(channels, channels, bias=False))
print("\ndense similarity E:", tuple(similarity.shape))

# ----------------------------------------------------------------------------
# Stage 2: threshold cosine similarity into a sparse cross-graph adjacency,
# symmetrize, and build the joint 2K-node structure for attention.
# ----------------------------------------------------------------------------
adj, adj_sym = threshold_adjacency(prop_g, prop_c, tau=0.2)
joint, joint_sym = build_joint_adjacency(adj, adj_sym)
print("edges above threshold:", int(adj.sum()), "| joint graph:", tuple(joint_sym.shape))
print("joint adjacency symmetric:", torch.equal(joint_sym, joint_sym.T))

dense = reproject(prop_c, rep_g.assign, rep_c.assign, grid=rep_g.grid)
print("reprojected field:", tuple(dense.shape))

# ----------------------------------------------------------------------------
# The full module composes all stages and fuses the result back into the
# inputs. Freshly constructed it is an exact pass-through: with an all-zero
# combination field the refined output equals the input feature.
# ----------------------------------------------------------------------------
module = GarmModule(channels, num_anchors=anchors, tau=0.8)
out = module(feat_g.unsqueeze(0), torch.zeros_like(feat_g).unsqueeze(0))
print("\nfresh module is a pass-through:", torch.equal(out[0], feat_g))
