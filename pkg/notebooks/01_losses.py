"""
Alignment losses on a hand-sized batch
======================================

Two image-text pairs in two dimensions, then a random batch with concept
spans, then a finite-difference check of the hand-written gradients.
"""

# %%
import numpy as np

from concept_align.data import AlignmentParams, ConceptSpan, ImageEmbedding, TextEmbedding, Triplet
from concept_align.gradcheck import check_gradients, random_batch, random_params
from concept_align.objectives import it_align_loss, rc_align_loss, total_loss

# %%
# Orthogonal pairs: each image matches its own caption and nothing else.
pairs = [
    Triplet(ImageEmbedding("a", [1, 0], [[1, 0]]), TextEmbedding("a", [1, 0], [[1, 0]]), []),
    Triplet(ImageEmbedding("b", [0, 1], [[0, 1]]), TextEmbedding("b", [0, 1], [[0, 1]]), []),
]
print("global loss, t=1 b=0:", it_align_loss(pairs, AlignmentParams(t_g=1, b_g=0)))
print("global loss, t=10 b=0:", it_align_loss(pairs, AlignmentParams(t_g=10, b_g=0)))

# %%
# Give the first caption a concept made of its only token. The concept has
# a perfectly matching region in its own image, and is orthogonal to the other.
pairs[0] = Triplet(pairs[0].image, pairs[0].text, [ConceptSpan("C1", (1,))])
p = AlignmentParams(t_g=10, b_g=-10, t_l=10, b_l=0, alpha=0.5)
print(total_loss(pairs, p))

# %%
# A larger random batch. Texts without concepts are silently skipped by the
# region-concept term.
rng = np.random.default_rng(0)
batch = random_batch(rng, B=4, r=6, s=6, w=3, h=8, vary=True)
params = random_params(rng)
print("region-concept loss:", rc_align_loss(batch, params))

# %%
rep = check_gradients(batch, params)
print(f"{rep.n_coords} coordinates, worst relative error {rep.max_rel_error:.2e} at {rep.worst}")
