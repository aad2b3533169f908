"""``concept-align`` command line front end.

Exit status: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Failures print one line ``ERROR <code>: <message>`` to standard error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import AlignmentParams, load_manifest, read_ccem, read_vectors
from .errors import ConceptAlignError, NumericFailure, UnknownId

log = logging.getLogger("concept_align")


class UsageError(Exception):
    exit_code = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ io helpers

def _emit(text: str, out):
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConceptAlignError(f"{path}: invalid JSON ({exc})") from None


def _read_column(path):
    """Numeric CSV, one value (or one row of values) per line; a header is skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                if line_no == 1:
                    continue
                raise ConceptAlignError(f"{path}: line {line_no} is not numeric") from None
    if rows and all(len(r) == 1 for r in rows):
        return np.array([r[0] for r in rows])
    return np.array(rows)


def _read_labels_csv(path):
    """image_id,label CSV -> dict."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row or (i == 1 and row[0] == "image_id"):
                continue
            if len(row) != 2:
                raise ConceptAlignError(f"{path}: line {i} needs image_id,label")
            out[row[0]] = row[1]
    return out


def _params(args) -> AlignmentParams:
    base = {}
    if getattr(args, "model", None):
        doc = _read_json(args.model)
        base = {k: float(doc[k]) for k in ("t_g", "b_g", "t_l", "b_l") if k in doc}
    for k in ("t_g", "b_g", "t_l", "b_l", "alpha", "beta", "k"):
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    try:
        return AlignmentParams(**base)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _lookup(store: dict, key, what):
    try:
        return store[key]
    except KeyError:
        raise UnknownId(f"unknown {what} id {key!r}") from None


def _class_specs(classes_path, texts_path, concepts_path):
    from .zeroshot import ClassSpec

    texts = {t.id: t for t in read_ccem(texts_path, kind="text")}
    vecs = read_vectors(concepts_path) if concepts_path else {}
    out = []
    for c in _read_json(classes_path):
        embs = [_lookup(vecs, cid, "concept") for cid in c.get("concepts", [])]
        out.append(ClassSpec(str(c["class_id"]), _lookup(texts, c["text"], "text"), embs))
    return out


def _prompt_specs(prompts_path, texts_path, concepts_path):
    from .zeroshot import ClassSpec

    texts = {t.id: t for t in read_ccem(texts_path, kind="text")}
    vecs = read_vectors(concepts_path) if concepts_path else {}
    out = {}
    for p in _read_json(prompts_path):
        pair = []
        for side in ("positive", "negative"):
            embs = [_lookup(vecs, cid, "concept") for cid in p.get(f"{side}_concepts", [])] if vecs else []
            pair.append(ClassSpec(side, _lookup(texts, p[side], "text"), embs))
        out[str(p["cui"])] = tuple(pair)
    return out


# ------------------------------------------------------------ subcommands

def cmd_loss(args):
    from .objectives import total_loss

    images = read_ccem(args.images, kind="image")
    texts = read_ccem(args.texts, kind="text")
    trips = load_manifest(args.manifest, images, texts)
    if not trips:
        raise ConceptAlignError("manifest is empty")
    lb = total_loss(trips, _params(args))
    doc = {"it_align": lb.it_align, "rc_align": lb.rc_align, "total": lb.total, "alpha": lb.alpha, "batch": len(trips)}
    _emit(json.dumps(doc) + "\n", args.out)


def cmd_gradcheck(args):
    from .gradcheck import REL_TOL, check_gradients, random_batch, random_params

    worst = 0.0
    where = ""
    for i in range(args.configs):
        rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(i,)))
        batch = random_batch(rng, args.batch, args.r, args.s, args.w, args.h)
        rep = check_gradients(batch, random_params(rng), step=args.step)
        if rep.max_rel_error >= worst:
            worst, where = rep.max_rel_error, f"config {i} {rep.worst}"
    _emit(json.dumps({"max_rel_error": worst, "worst": where, "configs": args.configs}) + "\n", args.out)
    if worst >= REL_TOL:
        raise NumericFailure(f"gradient check failed: max relative error {worst:.3e} ({where})")


def _spec_from_args(args):
    from .toy import SyntheticSpec

    return SyntheticSpec(
        n_concepts=args.n_concepts,
        n_classes=args.n_classes,
        samples_per_class=args.samples_per_class,
        r=args.r,
        s=args.s,
        d_img_raw=args.d_img,
        d_txt_raw=args.d_txt,
        noise_sigma=args.noise,
        seed=args.seed,
    )


def cmd_gen_synthetic(args):
    from .toy import generate_synthetic, save_synthetic

    if not args.out:
        raise UsageError("gen-synthetic needs --out DIR")
    ds = generate_synthetic(_spec_from_args(args), stream=args.stream)
    save_synthetic(ds, args.out)
    log.info("wrote %d samples to %s", len(ds.samples), args.out)


def cmd_train_toy(args):
    from .toy import TrainConfig, ablation_config, export_embeddings, load_synthetic, save_model, train, write_trace_csv

    if not args.out:
        raise UsageError("train-toy needs --out DIR")
    ds = load_synthetic(args.data)
    kw = dict(
        learning_rate=args.lr,
        steps=args.steps,
        alpha=args.alpha,
        h=args.h,
        seed=args.seed,
        warmup_steps_without_rc=args.warmup_steps_without_rc,
        momentum=args.momentum,
    )
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    cfg = ablation_config(**kw) if args.preset == "ablation" else TrainConfig(**kw)
    enc, params, trace = train(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.json", enc, params)
    write_trace_csv(trace, out / "trace.csv")
    if args.export:
        export_embeddings(enc, ds, out)
    log.info("final loss %.6f", trace[-1].total)


def cmd_zeroshot(args):
    from .zeroshot import predict_batch

    images = read_ccem(args.images, kind="image")
    classes = _class_specs(args.classes, args.texts, args.concepts)
    params = _params(args)
    preds = predict_batch(images, classes, params, beta=args.beta, k=args.k, threads=args.threads)
    ids = [c.class_id for c in classes]
    header = ["image_id"] + [f"p_{c}" for c in ids] + ["argmax"]
    if args.explain:
        header += [f"p_g_{c}" for c in ids] + [f"p_l_{c}" for c in ids]
    rows = []
    for im, p in zip(images, preds):
        row = [im.id] + [repr(float(x)) for x in p.p] + [ids[p.argmax]]
        if args.explain:
            row += [repr(float(x)) for x in p.p_g] + [repr(float(x)) for x in p.p_l]
        rows.append(row)
    _emit(_csv_text(header, rows), args.out)


def cmd_retrieve(args):
    from .zeroshot import retrieve

    queries = read_ccem(args.queries, kind=args.query_kind)
    other = "image" if args.query_kind == "text" else "text"
    candidates = read_ccem(args.candidates, kind=args.candidate_kind or other)
    ks = [int(k) for k in args.ks.split(",")]
    res = retrieve(queries, candidates, ks)
    doc = {d: {str(k): v for k, v in tab.items()} for d, tab in res.items()}
    _emit(json.dumps(doc) + "\n", args.out)


def cmd_annotate(args):
    from .zeroshot import annotate_concepts

    images = read_ccem(args.images, kind="image")
    prompts = _prompt_specs(args.prompts, args.texts, args.concepts)
    params = _params(args)
    cuis = list(prompts)
    pairs = [prompts[c] for c in cuis]
    rows = []
    for im in images:
        q = annotate_concepts(im, pairs, params, beta=args.beta, k=args.k)
        rows.append([im.id] + [repr(float(x)) for x in q])
    _emit(_csv_text(["image_id"] + cuis, rows), args.out)


def _cbm_features(args):
    from .explain import concept_similarity_features

    images = read_ccem(args.images, kind="image")
    vecs = read_vectors(args.concepts)
    cuis = sorted(vecs)
    embs = np.stack([vecs[c] for c in cuis])
    X = np.stack([concept_similarity_features(im, embs, mode=args.features, k=args.k) for im in images])
    return images, cuis, X


def cmd_cbm(args):
    from .explain import ConceptBottleneck, concept_class_association, disease_level_inspection, train_cbm

    if args.cbm_cmd == "train":
        images, cuis, X = _cbm_features(args)
        labels = _read_labels_csv(args.labels)
        y = [_lookup(labels, im.id, "image") for im in images]
        cbm = train_cbm(X, y, args.C, concept_ids=cuis)
        if not args.out:
            raise UsageError("cbm train needs --out FILE")
        cbm.save(args.out)
        acc = float(np.mean(np.array(cbm.class_ids)[cbm.predict(X)] == np.array(y)))
        log.info("training accuracy %.4f", acc)
        return
    if args.cbm_cmd == "explain":
        ranking = concept_class_association(ConceptBottleneck.load(args.model_json), args.class_id, args.top)
    else:
        ranking = disease_level_inspection([ConceptBottleneck.load(p) for p in args.models], args.class_id, args.top)
    _emit(_csv_text(["cui", "weight"], [[c, repr(w)] for c, w in ranking]), args.out)


def cmd_concept_diff(args):
    from .explain import concept_presence_difference

    pos = read_ccem(args.pos, kind="image")
    neg = read_ccem(args.neg, kind="image")
    if args.pos_ids or args.neg_ids:
        keep_p = set(Path(args.pos_ids).read_text(encoding="utf-8").split()) if args.pos_ids else None
        keep_n = set(Path(args.neg_ids).read_text(encoding="utf-8").split()) if args.neg_ids else None
        pos = [im for im in pos if keep_p is None or im.id in keep_p]
        neg = [im for im in neg if keep_n is None or im.id in keep_n]
    prompts = _prompt_specs(args.prompts, args.texts, args.concepts)
    rep = concept_presence_difference(
        pos, neg, prompts, _params(args), args.threshold, beta=args.beta, k=args.k, threads=args.threads
    )
    _emit(rep.to_csv(), args.out)


def cmd_extract(args):
    from .extraction import extract_all, load_vocab, read_captions

    vocab = load_vocab(args.vocab)
    results = extract_all(read_captions(args.captions), vocab, args.threshold)
    _emit("".join(r.to_json() + "\n" for r in results), args.out)


def cmd_stats(args):
    from .data import ConceptSpan
    from .extraction import corpus_stats, read_extractions

    if args.extractions:
        stream = read_extractions(args.extractions)
    elif args.manifest:
        stream = []
        with open(args.manifest, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        rec = json.loads(line)
                        spans = [ConceptSpan(c["cui"], tuple(c["tokens"])) for c in rec.get("concepts", [])]
                    except (ValueError, KeyError, TypeError) as exc:
                        raise ConceptAlignError(f"line {line_no}: {exc}") from None
                    stream.append(argparse.Namespace(concepts=spans))
    else:
        raise UsageError("stats needs --extractions or --manifest")
    _emit(_csv_text(["cui", "count"], corpus_stats(stream)), args.out)


def cmd_metrics(args):
    from .metrics import accuracy, auc, bootstrap_ci, paired_ttest

    if args.metrics_cmd == "ttest":
        t, p = paired_ttest(_read_column(args.a), _read_column(args.b))
        _emit(json.dumps({"t": t, "p": p, "test": "paired t, two-sided"}) + "\n", args.out)
        return
    labels = _read_column(args.labels)
    if args.metrics_cmd == "auc":
        values = _read_column(args.scores)
        labels = labels.astype(int)
        fn = auc
    else:
        values = _read_column(args.predictions)
        fn = accuracy
    doc = {"metric": args.metrics_cmd, "value": fn(values, labels)}
    if args.ci:
        ci = bootstrap_ci(fn, (values, labels), args.ci, args.seed, threads=args.threads)
        doc.update(ci_lo=ci.lo, ci_hi=ci.hi, ci_method="percentile bootstrap", resamples=args.ci, skipped=ci.n_skipped)
    _emit(json.dumps(doc) + "\n", args.out)


# ------------------------------------------------------------ parser

def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="output file or directory (default: stdout)")
    p.add_argument("--config", default=None, help="JSON file of flag defaults (flags override it)")
    p.add_argument("--quiet", action="store_true")
    return p


def _scalars(p, alpha=False, fusion=False):
    p.add_argument("--model", help="toy model JSON supplying t_g, b_g, t_l, b_l")
    for k in ("t_g", "b_g", "t_l", "b_l"):
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=float, default=None)
    if alpha:
        p.add_argument("--alpha", type=float, default=None)
    if fusion:
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--k", type=int, default=None, help="top-k regions per concept (default min(16, r))")


def build_parser():
    common = _common()
    ap = _Parser(prog="concept-align", description="Concept-aligned image-text toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("loss", parents=[common], help="evaluate the alignment losses on a manifest")
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--manifest", required=True)
    _scalars(p, alpha=True)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--h", type=int, default=8)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--s", type=int, default=5)
    p.add_argument("--w", type=int, default=2)
    p.add_argument("--configs", type=int, default=1)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a planted synthetic dataset")
    p.add_argument("--n-concepts", type=int, default=4)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--samples-per-class", type=int, default=32)
    p.add_argument("--r", type=int, default=6)
    p.add_argument("--s", type=int, default=6)
    p.add_argument("--d-img", type=int, default=32)
    p.add_argument("--d-txt", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--stream", type=int, default=1, help="1 for training draws, 2 for held-out")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-toy", parents=[common], help="train the linear toy encoders")
    p.add_argument("--data", required=True, help="directory written by gen-synthetic")
    p.add_argument("--preset", choices=["ablation", "plain"], default="ablation")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--h", type=int, default=16)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--warmup-steps-without-rc", type=int, default=0)
    p.add_argument("--export", action="store_true", help="also write encoded stores and prompt files")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("zeroshot", parents=[common], help="dual-path zero-shot classification")
    p.add_argument("--images", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--texts", required=True, help="store holding the class prompt texts")
    p.add_argument("--concepts", default=None, help="concept vector store")
    p.add_argument("--explain", action="store_true")
    _scalars(p, fusion=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("retrieve", parents=[common], help="cross-modal Recall@k")
    p.add_argument("--queries", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--query-kind", choices=["image", "text"], default="text")
    p.add_argument("--candidate-kind", choices=["image", "text"], default=None)
    p.add_argument("--ks", default="1,5,10")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("annotate", parents=[common], help="zero-shot concept annotation")
    p.add_argument("--images", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--concepts", default=None)
    _scalars(p, fusion=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("cbm", help="concept bottleneck models")
    csub = p.add_subparsers(dest="cbm_cmd", required=True, parser_class=_Parser)
    q = csub.add_parser("train", parents=[common])
    q.add_argument("--images", required=True)
    q.add_argument("--concepts", required=True)
    q.add_argument("--labels", required=True, help="CSV image_id,label")
    q.add_argument("--C", type=float, default=0.316, help="inverse L2 strength")
    q.add_argument("--features", choices=["global", "fused"], default="global")
    q.add_argument("--k", type=int, default=None)
    q.set_defaults(func=cmd_cbm)
    q = csub.add_parser("explain", parents=[common])
    q.add_argument("--model", dest="model_json", required=True)
    q.add_argument("--class", dest="class_id", required=True)
    q.add_argument("--top", type=int, default=None)
    q.set_defaults(func=cmd_cbm)
    q = csub.add_parser("inspect", parents=[common])
    q.add_argument("--models", nargs="+", required=True)
    q.add_argument("--class", dest="class_id", required=True)
    q.add_argument("--top", type=int, default=None)
    q.set_defaults(func=cmd_cbm)

    p = sub.add_parser("concept-diff", parents=[common], help="concept presence difference of two image sets")
    p.add_argument("--pos", required=True)
    p.add_argument("--neg", required=True)
    p.add_argument("--pos-ids", default=None, help="whitespace-separated ids to keep from --pos")
    p.add_argument("--neg-ids", default=None, help="whitespace-separated ids to keep from --neg")
    p.add_argument("--prompts", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--concepts", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    _scalars(p, fusion=True)
    p.set_defaults(func=cmd_concept_diff)

    p = sub.add_parser("extract-concepts", parents=[common], help="dictionary concept extraction")
    p.add_argument("--vocab", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", parents=[common], help="per-cui frequency table")
    p.add_argument("--extractions", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("metrics", help="AUC, accuracy and paired t-test")
    msub = p.add_subparsers(dest="metrics_cmd", required=True, parser_class=_Parser)
    q = msub.add_parser("auc", parents=[common])
    q.add_argument("--scores", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--ci", type=int, default=0, help="bootstrap resamples (0 = no interval)")
    q.set_defaults(func=cmd_metrics)
    q = msub.add_parser("acc", parents=[common])
    q.add_argument("--predictions", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--ci", type=int, default=0)
    q.set_defaults(func=cmd_metrics)
    q = msub.add_parser("ttest", parents=[common])
    q.add_argument("--a", required=True)
    q.add_argument("--b", required=True)
    q.set_defaults(func=cmd_metrics)
    return ap


def _parse(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        # flags > config file > defaults: reparse with the file as defaults
        conf = _read_json(args.config)
        if not isinstance(conf, dict):
            raise UsageError("--config must hold a JSON object")
        known = vars(args)
        unknown = [k for k in conf if k.replace("-", "_") not in known]
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        ap = build_parser()
        _set_leaf_defaults(ap, {k.replace("-", "_"): v for k, v in conf.items()})
        args = ap.parse_args(argv)
    return args


def _set_leaf_defaults(parser, defaults):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                _set_leaf_defaults(sp, defaults)
    own = {a.dest for a in parser._actions}
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in own})
    for a in parser._actions:
        if a.dest in defaults:
            a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(message)s",
            stream=sys.stderr,
        )
        with np.errstate(over="ignore", under="ignore"):
            args.func(args)
        return 0
    except UsageError as exc:
        print(f"ERROR 2: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"ERROR 4: {exc}", file=sys.stderr)
        return 4
    except ConceptAlignError as exc:
        print(f"ERROR {exc.exit_code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        msg = f"{exc.strerror}: {exc.filename}" if isinstance(exc, OSError) and exc.filename else str(exc)
        print(f"ERROR 3: {msg}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"ERROR 4: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
