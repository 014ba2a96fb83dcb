"""Parameter and multiply-accumulate accounting.

One FLOP here is one multiply-accumulate. Softmax, activations, normalization
arithmetic and pooling comparisons are not counted. Counts follow the modules
as implemented, so they agree exactly with :class:`laconv.tensor.MacCounter`
on a forward pass.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .layer import FULL, LANGUAGE_ONLY
from .net import ANSWERS, NetConfig

KINDS = ("conv", "dwconv", "dyconv", "generator", "laconv", "linear", "bn", "mlp", "pool",
         "text_encoder", "locate_head", "answer_head")


class UnknownLayer(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    """A layer description. Which fields matter depends on ``kind``.

    conv: standard k x k conv, d -> d_out. dwconv: static depth-wise conv.
    dyconv: dynamic depth-wise conv (kernels are inputs, not parameters).
    generator: the language-conditioned kernel generator of a LaConv layer.
    laconv: generator plus dyconv. linear: per-position d -> d_out with bias.
    text_encoder: ``vocab`` x d embedding, then a d -> d_out GRU and self-attention.
    """

    kind: str
    d: int
    d_out: int | None = None
    k: int = 1
    g: int = 1
    s: int = 1
    text_dim: int | None = None
    text_len: int = 1
    heads: int = 2
    mode: str = FULL
    vocab: int = 0
    expansion: int = 4
    bias: bool = True

    @property
    def out(self) -> int:
        return self.d if self.d_out is None else self.d_out

    @property
    def dt(self) -> int:
        return self.d if self.text_dim is None else self.text_dim


def generator_terms(layer: Layer, h: int, w: int) -> list[tuple[str, int, int]]:
    """Itemized (name, params, flops) of one kernel generator at an h x w map."""
    d, dt, l, s = layer.d, layer.dt, layer.text_len, layer.s
    kk = layer.k * layer.k * layer.g
    if layer.mode == LANGUAGE_ONLY:
        # W_X and W_Y exist but are unused; one condition row per example
        return [("w_x", s * s * d * d, 0), ("w_y", dt * d, 0), ("w_a", dt * d, dt * d),
                ("w_c", d * d, d * d), ("w_1", d * kk + kk, d * kk)]
    if layer.mode != FULL:
        raise UnknownLayer(f"unknown generation mode {layer.mode!r}")
    if h % s or w % s:
        raise ValueError(f"packing {s} does not divide {h}x{w}")
    n = (h // s) * (w // s)
    return [
        ("w_x", s * s * d * d, n * s * s * d * d),
        ("w_y", dt * d, l * dt * d),
        ("affinity", 0, n * l * d),
        ("w_a", dt * d, l * dt * d),
        ("mix", 0, n * l * d),
        ("w_c", d * d, n * d * d),
        ("w_1", d * kk + kk, n * d * kk),
    ]


def _text_terms(layer: Layer) -> list[tuple[str, int, int]]:
    e, d, l = layer.d, layer.out, layer.text_len
    return [
        ("embed", layer.vocab * e, 0),
        ("gru", e * 3 * d + d * 3 * d + 6 * d, l * (e * 3 * d + d * 3 * d)),
        ("attention", 4 * d * d, 4 * l * d * d + 2 * l * l * d),
    ]


def _answer_terms(layer: Layer, h: int, w: int) -> list[tuple[str, int, int]]:
    d, dt, hid, n = layer.d, layer.dt, 2 * layer.d, len(ANSWERS)
    rows = [("score", d, h * w * d), ("pool", 0, h * w * d)]
    if dt != d:
        rows.append(("text_w", dt * d, dt * d))
    rows += [("w1", d * hid + hid, d * hid), ("w2", hid * n + n, hid * n)]
    return rows


def params_of(layer: Layer) -> int:
    """Stored parameter count; independent of resolution."""
    kind, d, k = layer.kind, layer.d, layer.k
    if kind == "conv":
        return k * k * d * layer.out
    if kind == "dwconv":
        return k * k * d
    if kind in ("dyconv", "pool"):
        return 0
    if kind == "generator":
        return sum(p for _, p, _ in generator_terms(layer, layer.s, layer.s))
    if kind == "laconv":
        return params_of(_as(layer, "generator"))
    if kind == "linear":
        return d * layer.out + (layer.out if layer.bias else 0)
    if kind == "bn":
        return 2 * d
    if kind == "mlp":
        hid = layer.expansion * d
        return 2 * d * hid + 2 * hid + 2 * d
    if kind == "text_encoder":
        return sum(p for _, p, _ in _text_terms(layer))
    if kind == "locate_head":
        return d + 1
    if kind == "answer_head":
        return sum(p for _, p, _ in _answer_terms(layer, 1, 1))
    raise UnknownLayer(f"unknown layer kind {kind!r}")


def flops_of(layer: Layer, h: int = 1, w: int = 1) -> int:
    """Multiply-accumulates for one example at an h x w feature map."""
    kind, d, k = layer.kind, layer.d, layer.k
    hw = h * w
    if kind == "conv":
        return hw * k * k * d * layer.out
    if kind in ("dwconv", "dyconv"):
        return hw * k * k * d
    if kind in ("bn", "pool"):
        return 0
    if kind == "generator":
        return sum(f for _, _, f in generator_terms(layer, h, w))
    if kind == "laconv":
        return flops_of(_as(layer, "generator"), h, w) + flops_of(_as(layer, "dyconv"), h, w)
    if kind == "linear":
        return hw * d * layer.out
    if kind == "mlp":
        return 2 * hw * d * layer.expansion * d
    if kind == "text_encoder":
        return sum(f for _, _, f in _text_terms(layer))
    if kind == "locate_head":
        return hw * d
    if kind == "answer_head":
        return sum(f for _, _, f in _answer_terms(layer, h, w))
    raise UnknownLayer(f"unknown layer kind {kind!r}")


def _as(layer: Layer, kind: str) -> Layer:
    return Layer(**{**layer.__dict__, "kind": kind})


@dataclass
class Row:
    layer: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    name: str
    rows: list[Row] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def subtotal(self, prefix: str) -> tuple[int, int]:
        sel = [r for r in self.rows if r.layer.startswith(prefix)]
        return sum(r.params for r in sel), sum(r.flops for r in sel)

    @property
    def backbone(self) -> tuple[int, int]:
        """Stem plus stages, excluding the text encoder and the head."""
        p1, f1 = self.subtotal("stem")
        p2, f2 = self.subtotal("stage")
        return p1 + p2, f1 + f2

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "kind", "params", "flops"])
        for r in self.rows:
            wr.writerow([r.layer, r.kind, r.params, r.flops])
        wr.writerow(["total", "", self.params, self.flops])
        return buf.getvalue()

    def table(self) -> str:
        rows = [(r.layer, r.kind, f"{r.params:,}", f"{r.flops:,}") for r in self.rows]
        bp, bf = self.backbone
        rows += [("backbone", "", f"{bp:,}", f"{bf:,}"), ("total", "", f"{self.params:,}", f"{self.flops:,}")]
        head = ("layer", "kind", "params", "flops")
        widths = [max(len(x[i]) for x in rows + [head]) for i in range(4)]
        fmt = lambda r: f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:>{widths[2]}}  {r[3]:>{widths[3]}}"
        lines = [fmt(head), "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in rows[:-2]] + ["  ".join("-" * w for w in widths)] + [fmt(r) for r in rows[-2:]]
        return "\n".join(lines)


def report(cfg: NetConfig, text_len: int = 8, vocab_size: int = 0, resolution: int | None = None) -> CostReport:
    """Per-layer rows for one example with ``text_len`` tokens."""
    res = cfg.resolution if resolution is None else resolution
    rep = CostReport(cfg.name)

    def add(name, layer, h=1, w=1):
        rep.rows.append(Row(name, layer.kind, params_of(layer), flops_of(layer, h, w)))

    text = Layer("text_encoder", cfg.embed_dim, cfg.text_dim, text_len=text_len, vocab=vocab_size)
    for name, p, f in _text_terms(text):
        rep.rows.append(Row(f"text.{name}", "text_encoder", p, f))
    add("stem", Layer("linear", 3, cfg.stem_dim), res, res)
    prev = cfg.stem_dim
    r = res
    for i, st in enumerate(cfg.stages):
        r //= 2
        add(f"stage{i}.pool", Layer("pool", prev), r, r)
        if prev != st.out_channels:
            add(f"stage{i}.proj", Layer("linear", prev, st.out_channels), r, r)
        d = st.out_channels
        gen = Layer("generator", d, k=st.kernel, g=st.groups, s=st.packing, text_dim=cfg.text_dim,
                    text_len=text_len, heads=cfg.heads, mode=cfg.mode)
        for j in range(st.blocks):
            pre = f"stage{i}.block{j}"
            for name, p, f in generator_terms(gen, r, r):
                rep.rows.append(Row(f"{pre}.conv.{name}", "generator", p, f))
            add(f"{pre}.conv.dyconv", Layer("dyconv", d, k=st.kernel, g=st.groups), r, r)
            add(f"{pre}.bn", Layer("bn", d), r, r)
            add(f"{pre}.mlp", Layer("mlp", d), r, r)
        prev = d
    if cfg.head == "locate":
        add("head", Layer("locate_head", prev), r, r)
    else:
        add("head", Layer("answer_head", prev, text_dim=cfg.text_dim), r, r)
    return rep
