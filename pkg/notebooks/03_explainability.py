"""
Reading concepts out of a trained toy model
===========================================
"""

# %%
import numpy as np

from concept_align.explain import (
    concept_class_association,
    concept_presence_difference,
    concept_similarity_features,
    region_saliency,
    train_cbm,
)
from concept_align.toy import SyntheticSpec, ablation_config, concept_prompts, generate_synthetic, train
from concept_align.zeroshot import annotate_concepts

spec = SyntheticSpec(noise_sigma=0.0, seed=2)
enc, params, _ = train(ablation_config(seed=2), generate_synthetic(spec, 1))
held = generate_synthetic(spec, 2)
world = held.world
images = [enc.encode_image(s.image) for s in held.samples]
labels = np.array([s.label for s in held.samples])

# %%
# Zero-shot annotation: probability that each concept is present, from a
# "present" prompt against an "absent" prompt.
prompts = concept_prompts(enc, world)
first = held.samples[0]
q = annotate_concepts(images[0], [prompts[world.cui(j)] for j in range(spec.n_concepts)], params, k=2)
print("label", first.label, "planted", world.class_concepts[first.label])
print("presence", np.round(q, 3))

# %%
# Which region lights up for each planted concept?
T = enc.encode_text(world.text_protos).tokens
for cui, slot in first.region_slots.items():
    sal = region_saliency(images[0], T[int(cui[1:])])
    print(cui, "planted in region", slot, "saliency", np.round(sal, 2))

# %%
# Concept bottleneck: a linear classifier over concept similarities.
X = np.stack([concept_similarity_features(im, T) for im in images])
cbm = train_cbm(X, labels, concept_ids=[world.cui(j) for j in range(spec.n_concepts)])
print("CBM training accuracy", np.mean(cbm.predict(X) == labels))
for c in range(spec.n_classes):
    print("class", c, concept_class_association(cbm, c, top_n=2))

# %%
# Presence difference of class 0 against everything else.
pos = [im for im, y in zip(images, labels) if y == 0]
neg = [im for im, y in zip(images, labels) if y != 0]
report = concept_presence_difference(pos, neg, prompts, params, k=2)
print(report.to_csv())
