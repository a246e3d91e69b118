"""Loss terms on toy tensors.

Run: python demos/01_loss_terms.py

Walks through each distillation term on small random inputs and shows the
properties worth knowing before training with them: the response term is a
softened KL divergence, the attention term ignores feature scale, DF only
looks at the teacher's strongest channels, and FSP compares channel-flow
matrices.
"""

import torch

from stagedistill import losses as L

torch.manual_seed(0)
w = L.LossWeights(k_channels=4)

# Response: identical logits give zero; T^2 keeps the gradient scale
# roughly independent of the temperature.
t = torch.randn(8, 10)
s = torch.randn(8, 10)
print("response(t, t)            =", float(L.response_term(t, t, w)))
print("response(s, t)            =", float(L.response_term(s, t, w)))
print("  same, no T^2 scaling    =", float(L.response_term(s, t, w, t2_scaling=False)))

# Attention transfer: rescaling a feature map leaves the normalized
# attention map, and hence the distance, unchanged.
f_t = torch.randn(8, 16, 8, 8)
f_s = torch.randn(8, 16, 8, 8)
print("AT(f_t, f_s)              =", float(L.at_distance(f_t, f_s)))
print("AT(f_t, 7 * f_s)          =", float(L.at_distance(f_t, 7 * f_s)))

# DF keeps the K teacher channels with the largest mean activation.
print("top-4 teacher channels    =", L.df_topk_select(f_t, 4).tolist())
print("DF(f_t, f_s)              =", float(L.df_distance(f_t, f_s, 4)))

# Feature term over several taps: alpha * AT + beta * DF per tap.
pairs = [(f_t, f_s), (f_t[:, :, ::2, ::2], f_s[:, :, ::2, ::2])]
print("feature term (2 taps)     =", float(L.feature_term(pairs, w)))

# FSP: spatially averaged channel inner products between two layers.
g_t = L.fsp_matrix(torch.randn(8, 16, 8, 8), torch.randn(8, 32, 8, 8))
g_s = L.fsp_matrix(torch.randn(8, 16, 8, 8), torch.randn(8, 32, 8, 8))
print("FSP matrix shape          =", tuple(g_t.shape))
print("relation(g_t, g_t)        =", float(L.relation_term([g_t], [g_t], w)))
print("relation(g_t, g_s)        =", float(L.relation_term([g_t], [g_s], w)))

# The combined loss is a weighted sum; missing branches count as zero.
y = torch.randint(0, 10, (8,))
parts = {
    "ce": L.cross_entropy(s, y),
    "response": L.response_term(s, t, w),
    "feature": L.feature_term(pairs, w),
}
print("combined (no relation)    =", float(L.rskd_total_loss(parts, w)))
