"""Desk-scale stand-in for pre-training.

A seeded generator plants concept prototypes into image regions and text
tokens; two linear maps play the role of the image and text encoders and are
fit by gradient descent on ``it_align + alpha * rc_align``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import AlignmentParams, ConceptSpan, ImageEmbedding, TextEmbedding, Triplet
from .errors import Divergence, SpecInvalid
from .objectives import PackedBatch, packed_loss
from .zeroshot import ClassSpec, predict_batch

log = logging.getLogger(__name__)

T_MIN = 1e-6


@dataclass(frozen=True)
class SyntheticSpec:
    n_concepts: int = 4
    n_classes: int = 4
    samples_per_class: int = 32
    r: int = 6
    s: int = 6
    d_img_raw: int = 32
    d_txt_raw: int = 32
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_classes < 2 or self.n_concepts < self.n_classes:
            raise SpecInvalid("need n_concepts >= n_classes >= 2")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise_sigma must be >= 0")
        if self.samples_per_class < 1 or self.d_img_raw < 1 or self.d_txt_raw < 1:
            raise SpecInvalid("sizes must be positive")
        per_class = -(-self.n_concepts // self.n_classes)
        if per_class > self.r or per_class > self.s:
            raise SpecInvalid(f"{per_class} concepts per class do not fit in r={self.r}, s={self.s}")


@dataclass
class RawSample:
    image: np.ndarray  # (r, d_img_raw)
    text: np.ndarray  # (s, d_txt_raw)
    concepts: List[ConceptSpan]
    label: int
    region_slots: dict  # cui -> planted region index (0-based)


@dataclass
class SyntheticWorld:
    """Everything shared between train and held-out draws of one seed."""

    spec: SyntheticSpec
    image_protos: np.ndarray  # (K, d_img_raw), unit rows
    text_protos: np.ndarray  # (K, d_txt_raw), unit rows
    class_concepts: List[List[int]]

    def cui(self, j: int) -> str:
        return f"C{j:07d}"


@dataclass
class SyntheticDataset:
    world: SyntheticWorld
    samples: List[RawSample]

    @property
    def associations(self):
        """Ground truth: per sample, planted cui -> region slot."""
        return [s.region_slots for s in self.samples]


def make_world(spec: SyntheticSpec) -> SyntheticWorld:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    K = spec.n_concepts
    img = rng.normal(size=(K, spec.d_img_raw))
    txt = rng.normal(size=(K, spec.d_txt_raw))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    txt /= np.linalg.norm(txt, axis=1, keepdims=True)
    class_concepts = [[j for j in range(K) if j % spec.n_classes == c] for c in range(spec.n_classes)]
    return SyntheticWorld(spec, img, txt, class_concepts)


FILLER_FLOOR = 0.05


def _filler(rng, n, d, sigma):
    # at sigma == 0 a small floor keeps unplanted slots off the zero vector
    return max(sigma, FILLER_FLOOR) * rng.normal(size=(n, d))


def generate_synthetic(spec: SyntheticSpec, stream: int = 1) -> SyntheticDataset:
    """Draw a labelled dataset; ``stream`` selects an independent sample stream.

    Streams share prototypes (same seed), so stream 1 can train and stream 2
    serve as held-out data. Class c = i mod n_classes; its concepts go into
    distinct random region and token slots. Every other slot is isotropic
    N(0, noise_sigma^2) noise and planted slots get the same noise on top.
    """
    world = make_world(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))
    sig = spec.noise_sigma
    samples = []
    for i in range(spec.samples_per_class * spec.n_classes):
        c = i % spec.n_classes
        planted = world.class_concepts[c]
        image = _filler(rng, spec.r, spec.d_img_raw, sig)
        text = _filler(rng, spec.s, spec.d_txt_raw, sig)
        rslots = rng.permutation(spec.r)[: len(planted)]
        tslots = rng.permutation(spec.s)[: len(planted)]
        spans, region_slots = [], {}
        for j, ri, ti in zip(planted, rslots, tslots):
            image[ri] = world.image_protos[j]
            text[ti] = world.text_protos[j]
            spans.append((int(ti), ConceptSpan(world.cui(j), (int(ti) + 1,))))
            region_slots[world.cui(j)] = int(ri)
        if sig > 0:
            for ri, ti in zip(rslots, tslots):
                image[ri] += sig * rng.normal(size=spec.d_img_raw)
                text[ti] += sig * rng.normal(size=spec.d_txt_raw)
        spans.sort(key=lambda t: t[0])
        samples.append(RawSample(image, text, [sp for _, sp in spans], c, region_slots))
    return SyntheticDataset(world, samples)


# ------------------------------------------------------------ encoder

@dataclass
class ToyEncoder:
    """Linear maps raw -> h shared by [CLS] and slots.

    The [CLS] input is the mean of the slot inputs. Optional ``*_cls_head``
    (h x h) matrices act on the [CLS] vector only, like a projection head.
    """

    image_proj: np.ndarray  # (d_img_raw, h)
    text_proj: np.ndarray  # (d_txt_raw, h)
    image_cls_head: Optional[np.ndarray] = None
    text_cls_head: Optional[np.ndarray] = None

    @property
    def h(self) -> int:
        return self.image_proj.shape[1]

    @classmethod
    def init(cls, d_img_raw, d_txt_raw, h, seed=0, cls_head=False):
        rng = np.random.default_rng(seed)
        ai, at = 1 / np.sqrt(d_img_raw), 1 / np.sqrt(d_txt_raw)
        enc = cls(rng.uniform(-ai, ai, (d_img_raw, h)), rng.uniform(-at, at, (d_txt_raw, h)))
        if cls_head:
            ah = 1 / np.sqrt(h)
            enc.image_cls_head = rng.uniform(-ah, ah, (h, h))
            enc.text_cls_head = rng.uniform(-ah, ah, (h, h))
        return enc

    @staticmethod
    def _encode(raw, proj, head):
        raw = np.asarray(raw, dtype=np.float64)
        rows = raw @ proj
        cls = rows.mean(axis=-2)
        if head is not None:
            cls = cls @ head
        return cls, rows

    def encode_image(self, raw, id="") -> ImageEmbedding:
        return ImageEmbedding(id, *self._encode(raw, self.image_proj, self.image_cls_head))

    def encode_text(self, raw, id="") -> TextEmbedding:
        return TextEmbedding(id, *self._encode(raw, self.text_proj, self.text_cls_head))

    def copy(self):
        return ToyEncoder(*(None if m is None else m.copy() for m in self.matrices()))

    def matrices(self):
        return [self.image_proj, self.text_proj, self.image_cls_head, self.text_cls_head]


def save_model(path, encoder: ToyEncoder, params: AlignmentParams):
    doc = {
        "h": encoder.h,
        "image_proj": encoder.image_proj.tolist(),
        "text_proj": encoder.text_proj.tolist(),
        "t_g": float(params.t_g),
        "b_g": float(params.b_g),
        "t_l": float(params.t_l),
        "b_l": float(params.b_l),
    }
    if encoder.image_cls_head is not None:
        doc["image_cls_head"] = encoder.image_cls_head.tolist()
        doc["text_cls_head"] = encoder.text_cls_head.tolist()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    heads = [doc.get(k) for k in ("image_cls_head", "text_cls_head")]
    enc = ToyEncoder(
        np.asarray(doc["image_proj"], float),
        np.asarray(doc["text_proj"], float),
        *(None if m is None else np.asarray(m, float) for m in heads),
    )
    if enc.h != doc["h"]:
        raise ValueError("model JSON: h disagrees with projection shapes")
    params = AlignmentParams(t_g=doc["t_g"], b_g=doc["b_g"], t_l=doc["t_l"], b_l=doc["b_l"])
    return enc, params


def to_triplets(encoder: ToyEncoder, dataset: SyntheticDataset, prefix="s") -> List[Triplet]:
    out = []
    for i, smp in enumerate(dataset.samples):
        out.append(
            Triplet(
                encoder.encode_image(smp.image, f"{prefix}{i:05d}_img"),
                encoder.encode_text(smp.text, f"{prefix}{i:05d}_txt"),
                smp.concepts,
                smp.label,
            )
        )
    return out


def class_specs(encoder: ToyEncoder, world: SyntheticWorld) -> List[ClassSpec]:
    """One prompt per class made of exactly its planted concept tokens."""
    out = []
    for c, concepts in enumerate(world.class_concepts):
        text = encoder.encode_text(world.text_protos[concepts], f"class{c}")
        out.append(ClassSpec(str(c), text, list(text.tokens)))
    return out


def concept_prompts(encoder: ToyEncoder, world: SyntheticWorld) -> dict:
    """cui -> (positive, negative) prompt texts for annotation.

    The positive prompt is the concept's own token; the negative prompt
    lists every other concept.
    """
    K = world.spec.n_concepts
    out = {}
    for j in range(K):
        cui = world.cui(j)
        others = [i for i in range(K) if i != j]
        out[cui] = (
            encoder.encode_text(world.text_protos[[j]], f"present_{cui}"),
            encoder.encode_text(world.text_protos[others], f"absent_{cui}"),
        )
    return out


# ------------------------------------------------------------ training

@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 1500
    batch_size: int = 0  # 0 = full batch
    alpha: float = 0.5
    h: int = 16
    t_g: float = 10.0
    b_g: float = 0.0
    t_l: float = 10.0
    b_l: float = 0.0
    momentum: float = 0.0
    warmup_steps_without_rc: int = 0
    learn_local_scalars: bool = False
    label_disjoint: bool = False
    cls_head: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise SpecInvalid("learning_rate must be >= 0")
        if self.h < 1:
            raise SpecInvalid("h must be >= 1")
        if self.steps < 1:
            raise SpecInvalid("steps must be >= 1")


def ablation_config(**overrides) -> TrainConfig:
    """Preset that keeps RC-Align well-posed at desk scale.

    Every minibatch holds one sample per class, so no pair of images shares
    a planted concept and no concept is pushed away from its own prototype
    by a same-class negative. The local scale and bias stay frozen at
    t_l=10, b_l=10, which keeps the log-sigmoid terms out of saturation.
    """
    kw = dict(batch_size=4, label_disjoint=True, b_l=10.0)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class TraceRow:
    step: int
    it_align: float
    rc_align: float
    total: float


def _pack_raw(encoder, images, texts, concepts):
    """Encode raw slot arrays and pack them; images (B,r,d), texts (B,s,d)."""
    B, r, _ = images.shape
    img_cls, regions = encoder._encode(images, encoder.image_proj, encoder.image_cls_head)
    txt_cls, tokens = encoder._encode(texts, encoder.text_proj, encoder.text_cls_head)
    return PackedBatch(img_cls, regions, np.ones((B, r), dtype=bool), txt_cls, tokens, concepts)


def _label_disjoint_batch(rng, labels, bs):
    """Sample up to ``bs`` items with pairwise distinct labels."""
    classes = np.unique(labels)
    chosen = rng.permutation(classes)[: min(bs, classes.size)]
    return np.array(sorted(rng.choice(np.flatnonzero(labels == c)) for c in chosen))


def _init_encoder(config, spec, rng):
    return ToyEncoder.init(spec.d_img_raw, spec.d_txt_raw, config.h, seed=rng.integers(2**63), cls_head=config.cls_head)


def initial_encoder(config: TrainConfig, spec: SyntheticSpec) -> ToyEncoder:
    """The encoder ``train`` starts from for this config."""
    return _init_encoder(config, spec, np.random.default_rng(config.seed))


def train(config: TrainConfig, dataset: SyntheticDataset):
    """Fit the toy encoders and logit scales/biases by gradient descent.

    Returns ``(encoder, params, trace)``; the trace holds the loss evaluated
    at the start of every step.
    """
    if not dataset.samples:
        raise SpecInvalid("empty dataset")
    spec = dataset.world.spec
    images = np.stack([s.image for s in dataset.samples])
    texts = np.stack([s.text for s in dataset.samples])
    concepts_by_sample = [[np.asarray(c.token_indices) - 1 for c in s.concepts] for s in dataset.samples]
    N = len(dataset.samples)
    labels = np.array([s.label for s in dataset.samples])
    bs = N if config.batch_size <= 0 else min(config.batch_size, N)

    rng = np.random.default_rng(config.seed)
    enc = _init_encoder(config, spec, rng)
    scal = np.array([config.t_g, config.b_g, config.t_l, config.b_l], dtype=np.float64)
    targets = [m for m in enc.matrices() if m is not None] + [scal]
    vel = [np.zeros_like(x) for x in targets]
    trace = []

    for step in range(config.steps):
        if config.label_disjoint:
            idx = _label_disjoint_batch(rng, labels, bs)
        elif bs == N:
            idx = np.arange(N)
        else:
            idx = np.sort(rng.choice(N, bs, replace=False))
        conc = [(b, ix) for b, i in enumerate(idx) for ix in concepts_by_sample[i]]
        params = AlignmentParams(t_g=scal[0], b_g=scal[1], t_l=scal[2], b_l=scal[3], alpha=config.alpha)
        alpha = 0.0 if step < config.warmup_steps_without_rc else config.alpha
        with np.errstate(all="ignore"):  # non-finite values are caught just below
            pb = _pack_raw(enc, images[idx], texts[idx], conc)
            it, rc, total, g = packed_loss(pb, params, alpha=alpha, need_grad=True)
        if not np.isfinite(total):
            raise Divergence(step)
        trace.append(TraceRow(step, float(it), float(rc), float(total)))

        Xi, Xt = images[idx], texts[idx]
        mi, mt = Xi.mean(1), Xt.mean(1)
        gi, gt = g.image_cls, g.text_cls
        grads = []
        if config.cls_head:
            grads_head = [(mi @ enc.image_proj).T @ gi, (mt @ enc.text_proj).T @ gt]
            gi, gt = gi @ enc.image_cls_head.T, gt @ enc.text_cls_head.T
        grads.append(np.einsum("brd,brh->dh", Xi, g.regions) + mi.T @ gi)
        grads.append(np.einsum("bsd,bsh->dh", Xt, g.tokens) + mt.T @ gt)
        if config.cls_head:
            grads.extend(grads_head)
        dsc = np.array([g.t_g, g.b_g, g.t_l, g.b_l])
        if not config.learn_local_scalars:
            dsc[2:] = 0.0
        grads.append(dsc)
        if not all(np.all(np.isfinite(x)) for x in grads):
            raise Divergence(step, "gradient became non-finite")
        for v, x, gr in zip(vel, targets, grads):
            v *= config.momentum
            v += gr
            x -= config.learning_rate * v
        scal[0] = max(scal[0], T_MIN)
        scal[2] = max(scal[2], T_MIN)
        if step % 250 == 0:
            log.debug("step %d total %.6f it %.6f rc %.6f", step, total, it, rc)

    params = AlignmentParams(t_g=scal[0], b_g=scal[1], t_l=scal[2], b_l=scal[3], alpha=config.alpha)
    return enc, params, trace


def smoothed(trace, n=10, last=False):
    vals = [t.total for t in (trace[-n:] if last else trace[:n])]
    return float(np.mean(vals))


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,it_align,rc_align,total\n")
        for t in trace:
            fh.write(f"{t.step},{t.it_align!r},{t.rc_align!r},{t.total!r}\n")


def eval_synthetic(encoder, params, heldout: SyntheticDataset, beta=0.5, k=2) -> float:
    """Zero-shot accuracy on held-out samples with class prompts from the world."""
    classes = class_specs(encoder, heldout.world)
    images = [encoder.encode_image(s.image) for s in heldout.samples]
    preds = predict_batch(images, classes, params, beta=beta, k=k)
    correct = [p.argmax == s.label for p, s in zip(preds, heldout.samples)]
    return float(np.mean(correct))


# ------------------------------------------------------------ on-disk layout

def save_synthetic(dataset: SyntheticDataset, out_dir) -> None:
    """Write raw slots (CCEM), a manifest and the generating world to a directory."""
    from .data import RawRecord, write_ccem

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"s{i:05d}" for i in range(len(dataset.samples))]
    write_ccem([RawRecord(i, s.image) for i, s in zip(ids, dataset.samples)], out / "images_raw.ccem")
    write_ccem([RawRecord(i, s.text) for i, s in zip(ids, dataset.samples)], out / "texts_raw.ccem")
    with open(out / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i, s in zip(ids, dataset.samples):
            rec = {
                "image": i,
                "text": i,
                "concepts": [{"cui": c.cui, "tokens": list(c.token_indices)} for c in s.concepts],
                "label": s.label,
                "region_slots": s.region_slots,
            }
            fh.write(json.dumps(rec) + "\n")
    w = dataset.world
    doc = {
        "spec": asdict(w.spec),
        "image_protos": w.image_protos.tolist(),
        "text_protos": w.text_protos.tolist(),
        "class_concepts": w.class_concepts,
    }
    (out / "world.json").write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_synthetic(in_dir) -> SyntheticDataset:
    from .data import read_ccem

    d = Path(in_dir)
    doc = json.loads((d / "world.json").read_text(encoding="utf-8"))
    world = SyntheticWorld(
        SyntheticSpec(**doc["spec"]),
        np.asarray(doc["image_protos"], float),
        np.asarray(doc["text_protos"], float),
        [list(c) for c in doc["class_concepts"]],
    )
    images = {r.id: r.as_matrix() for r in read_ccem(d / "images_raw.ccem", kind="raw")}
    texts = {r.id: r.as_matrix() for r in read_ccem(d / "texts_raw.ccem", kind="raw")}
    samples = []
    with open(d / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            spans = [ConceptSpan(c["cui"], tuple(c["tokens"])) for c in rec["concepts"]]
            samples.append(
                RawSample(images[rec["image"]], texts[rec["text"]], spans, int(rec["label"]), rec.get("region_slots", {}))
            )
    return SyntheticDataset(world, samples)


def export_embeddings(encoder: ToyEncoder, dataset: SyntheticDataset, out_dir) -> None:
    """Encode a dataset into the stores and JSON files the CLI consumes.

    images.ccem / texts.ccem hold the encoded samples (matching ids), and
    prompts.ccem the class and concept prompts. concepts.ccem holds one
    vector per cui. classes.json, prompts.json and labels.csv reference them.
    """
    from .data import RawRecord, write_ccem

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"s{i:05d}" for i in range(len(dataset.samples))]
    write_ccem([encoder.encode_image(s.image, i) for i, s in zip(ids, dataset.samples)], out / "images.ccem")
    write_ccem([encoder.encode_text(s.text, i) for i, s in zip(ids, dataset.samples)], out / "texts.ccem")
    w = dataset.world
    K = w.spec.n_concepts
    concept_vecs = encoder.encode_text(w.text_protos).tokens
    write_ccem([RawRecord(w.cui(j), concept_vecs[j][None, :]) for j in range(K)], out / "concepts.ccem")
    classes = class_specs(encoder, w)
    prompts = concept_prompts(encoder, w)
    store = [c.text for c in classes]
    for pos, neg in prompts.values():
        store.extend([pos, neg])
    write_ccem(store, out / "prompts.ccem")
    class_doc = [
        {"class_id": c.class_id, "text": c.text.id, "concepts": [w.cui(j) for j in w.class_concepts[int(c.class_id)]]}
        for c in classes
    ]
    (out / "classes.json").write_text(json.dumps(class_doc, indent=1) + "\n", encoding="utf-8")
    prompt_doc = [
        {
            "cui": w.cui(j),
            "positive": prompts[w.cui(j)][0].id,
            "negative": prompts[w.cui(j)][1].id,
            "positive_concepts": [w.cui(j)],
            "negative_concepts": [w.cui(i) for i in range(K) if i != j],
        }
        for j in range(K)
    ]
    (out / "prompts.json").write_text(json.dumps(prompt_doc, indent=1) + "\n", encoding="utf-8")
    with open(out / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image_id,label\n")
        for i, s in zip(ids, dataset.samples):
            fh.write(f"{i},{s.label}\n")
