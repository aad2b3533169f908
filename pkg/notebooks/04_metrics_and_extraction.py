"""
Metrics and concept extraction
==============================
"""

# %%
from pathlib import Path

import numpy as np

from concept_align.extraction import corpus_stats, extract, extract_all, load_vocab, read_captions
from concept_align.metrics import accuracy, auc, bootstrap_ci, paired_ttest

rng = np.random.default_rng(0)
y = rng.integers(0, 2, 200)
model_a = y + rng.normal(0, 0.8, 200)
model_b = y + rng.normal(0, 1.2, 200)

# %%
for name, s in (("a", model_a), ("b", model_b)):
    lo, hi = bootstrap_ci(auc, (s, y), n_resamples=1000, seed=1)
    print(f"model {name}: AUC {auc(s, y):.3f}  95% CI [{lo:.3f}, {hi:.3f}]")
print("accuracy of a at threshold 0.5:", accuracy((model_a > 0.5).astype(int), y))

# %%
# Per-split AUCs of the two models, compared pairwise.
splits = np.array_split(rng.permutation(200), 8)
a = [auc(model_a[ix], y[ix]) for ix in splits]
b = [auc(model_b[ix], y[ix]) for ix in splits]
print("paired t-test over 8 splits: t=%.3f p=%.4f" % paired_ttest(a, b))

# %%
# The scan is greedy from the left: at each token the longest synonym that
# starts there wins. Here "left lung" consumes "lung" before "lung cancer"
# gets a chance, leaving "cancer" on its own.
fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
vocab = load_vocab(fixtures / "vocab.tsv")
res = extract("Chest X-ray: left lung cancer, no pleural effusion.", vocab)
print(res.tokens)
for span in res.spans:
    print(span)

# %%
results = extract_all(read_captions(fixtures / "captions.jsonl"), vocab)
print(corpus_stats(results)[:5])
