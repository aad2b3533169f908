"""Central finite-difference check of the analytic loss gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AlignmentParams, ConceptSpan, ImageEmbedding, TextEmbedding, Triplet, TripletBatch
from .objectives import PackedBatch, packed_loss

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def random_batch(rng, B=3, r=4, s=5, w=2, h=6, vary=False) -> TripletBatch:
    """Gaussian triplets with up to ``w`` random concept spans per text.

    With ``vary`` the region/token/concept counts are drawn per item from
    1..r, 1..s and 0..w.
    """
    trips = []
    for m in range(B):
        rm = int(rng.integers(1, r + 1)) if vary else r
        sm = int(rng.integers(1, s + 1)) if vary else s
        wm = int(rng.integers(0, w + 1)) if vary else w
        image = ImageEmbedding(f"i{m}", rng.normal(size=h), rng.normal(size=(rm, h)))
        text = TextEmbedding(f"t{m}", rng.normal(size=h), rng.normal(size=(sm, h)))
        spans = []
        for j in range(wm):
            n = int(rng.integers(1, sm + 1))
            idx = np.sort(rng.choice(sm, size=n, replace=False)) + 1
            spans.append(ConceptSpan(f"C{j}", tuple(int(i) for i in idx)))
        trips.append(Triplet(image, text, spans))
    return TripletBatch(trips)


def random_params(rng) -> AlignmentParams:
    return AlignmentParams(
        t_g=float(rng.uniform(0.5, 12)),
        b_g=float(rng.normal(0, 2)),
        t_l=float(rng.uniform(0.5, 12)),
        b_l=float(rng.normal(0, 2)),
        alpha=float(rng.uniform(0, 1)),
    )


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: str


def _rel(a, n):
    # the denominator never drops below ABS_FLOOR / REL_TOL, so an absolute
    # discrepancy under 1e-7 can never register as a relative failure
    return abs(a - n) / max(abs(a), abs(n), ABS_FLOOR / REL_TOL)


def check_gradients(batch: TripletBatch, params: AlignmentParams, step: float = FD_STEP) -> GradCheckReport:
    """Compare every analytic partial derivative with a central difference."""
    pb = PackedBatch.from_batch(batch)
    _, _, _, g = packed_loss(pb, params, need_grad=True)
    worst, worst_name, count = 0.0, "", 0

    def total():
        return packed_loss(pb, params)[2]

    arrays = [
        ("image_cls", pb.image_cls, g.image_cls, None),
        ("regions", pb.regions, g.regions, pb.region_mask),
        ("text_cls", pb.text_cls, g.text_cls, None),
        ("tokens", pb.tokens, g.tokens, np.arange(pb.tokens.shape[1])[None, :] < pb.token_counts[:, None]),
    ]
    for name, x, gx, valid in arrays:
        for pos in np.ndindex(x.shape):
            if valid is not None and not valid[pos[:2] if x.ndim == 3 else pos[:1]]:
                continue
            old = x[pos]
            x[pos] = old + step
            up = total()
            x[pos] = old - step
            down = total()
            x[pos] = old
            e = _rel(gx[pos], (up - down) / (2 * step))
            count += 1
            if e > worst:
                worst, worst_name = e, f"{name}{list(pos)}"
    for name in ("t_g", "b_g", "t_l", "b_l"):
        v = getattr(params, name)
        up = packed_loss(pb, params.replace(**{name: v + step}))[2]
        down = packed_loss(pb, params.replace(**{name: v - step}))[2]
        e = _rel(getattr(g, name), (up - down) / (2 * step))
        count += 1
        if e > worst:
            worst, worst_name = e, name
    return GradCheckReport(float(worst), count, worst_name)
