"""Per-token decode workload: model shapes, operation graph, analytics.

Model presets use publicly documented layer dimensions; every preset's
parameter count is cross-checked against the advertised size in the tests.
The embedding table is treated as tied to the output projection: one
vocab x d_model GeMV per token carries its weight traffic.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

from .hwconfig import QuantizationSpec


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class Matrix:
    name: str
    rows: int  # output dimension
    cols: int  # input dimension

    @property
    def elements(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layer_count: int
    d_model: int
    ffn_dim: int
    head_count: int
    kv_head_count: int
    vocab_size: int
    gated_ffn: bool = False  # three FFN matrices instead of two
    advertised_params: float = 0.0

    def __post_init__(self):
        for f in ("layer_count", "d_model", "ffn_dim", "head_count",
                  "kv_head_count", "vocab_size"):
            if getattr(self, f) < 1:
                raise WorkloadError(f"model.{f} must be >= 1")
        if self.d_model % self.head_count:
            raise WorkloadError("d_model must be divisible by head_count")
        if self.head_count % self.kv_head_count:
            raise WorkloadError("head_count must be divisible by kv_head_count")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.head_count

    @property
    def kv_dim(self) -> int:
        return self.kv_head_count * self.head_dim

    def layer_matrices(self) -> list:
        d, kv, ffn = self.d_model, self.kv_dim, self.ffn_dim
        mats = [
            Matrix("q_proj", d, d),
            Matrix("k_proj", kv, d),
            Matrix("v_proj", kv, d),
            Matrix("o_proj", d, d),
        ]
        if self.gated_ffn:
            mats += [Matrix("ffn_gate", ffn, d), Matrix("ffn_up", ffn, d),
                     Matrix("ffn_down", d, ffn)]
        else:
            mats += [Matrix("ffn_up", ffn, d), Matrix("ffn_down", d, ffn)]
        return mats

    def head_matrix(self) -> Matrix:
        return Matrix("lm_head", self.vocab_size, self.d_model)

    def all_matrices(self) -> list:
        """Every weight GeMV of one decode token, in execution order."""
        out = []
        for layer in range(self.layer_count):
            for m in self.layer_matrices():
                out.append(Matrix(f"L{layer}.{m.name}", m.rows, m.cols))
        out.append(self.head_matrix())
        return out

    @property
    def param_count(self) -> int:
        return sum(m.elements for m in self.all_matrices())

    def weight_bytes_total(self, quant: QuantizationSpec) -> int:
        return math.ceil(self.param_count * quant.weight_bits / 8)

    def kv_bytes_per_token(self, seq_len: int, quant: QuantizationSpec) -> int:
        """DRAM KV traffic for one token: read the history, append one entry."""
        per_layer = 2 * self.kv_dim * quant.activation_bytes
        return self.layer_count * per_layer * (seq_len + 1)


@dataclass(frozen=True)
class DecodeOp:
    name: str
    group: str           # 'flash_npu_gemv' | 'npu_kv' | 'dram_kv_load' | 'sfu'
    layer: int           # -1 for the final head
    weight_bytes: int = 0
    ops: int = 0
    dram_bytes: int = 0
    matrix: Matrix | None = None
    depends_on: int = -1  # index of the op this one waits for


@dataclass
class DecodeGraph:
    model: ModelSpec
    seq_len: int
    ops: list = field(default_factory=list)

    def total(self, group: str, attr: str) -> int:
        return sum(getattr(op, attr) for op in self.ops if op.group == group)

    @property
    def weight_bytes(self) -> int:
        return self.total("flash_npu_gemv", "weight_bytes")

    @property
    def kv_bytes(self) -> int:
        return (self.total("dram_kv_load", "dram_bytes")
                + self.total("npu_kv", "dram_bytes"))


def build_decode_graph(model: ModelSpec, seq_len: int,
                       quant: QuantizationSpec | None = None) -> DecodeGraph:
    """Operation list for one decode token, in dependency order."""
    if seq_len < 1:
        raise WorkloadError("seq_len must be >= 1")
    quant = quant or QuantizationSpec()
    act = quant.activation_bytes
    wbits = quant.weight_bits
    g = DecodeGraph(model=model, seq_len=seq_len)
    ops = g.ops

    def add(name, group, layer, **kw):
        ops.append(DecodeOp(name=name, group=group, layer=layer,
                            depends_on=len(ops) - 1, **kw))

    for layer in range(model.layer_count):
        add(f"L{layer}.norm_in", "sfu", layer, ops=4 * model.d_model)
        for m in model.layer_matrices():
            mat = Matrix(f"L{layer}.{m.name}", m.rows, m.cols)
            if m.name == "ffn_up" and not model.gated_ffn:
                add(f"L{layer}.act", "sfu", layer, ops=model.ffn_dim)
            add(mat.name, "flash_npu_gemv", layer,
                weight_bytes=math.ceil(mat.elements * wbits / 8),
                ops=2 * mat.elements, matrix=mat)
            if m.name == "v_proj":
                # attention happens between the V projection and O projection
                kv_hist = 2 * seq_len * model.kv_dim * act
                add(f"L{layer}.kv_load", "dram_kv_load", layer,
                    dram_bytes=kv_hist + 2 * model.kv_dim * act)
                add(f"L{layer}.attn_score", "npu_kv", layer,
                    ops=2 * seq_len * model.d_model)
                add(f"L{layer}.softmax", "sfu", layer,
                    ops=4 * model.head_count * seq_len)
                add(f"L{layer}.attn_value", "npu_kv", layer,
                    ops=2 * seq_len * model.d_model)
        if model.gated_ffn:
            add(f"L{layer}.act", "sfu", layer, ops=2 * model.ffn_dim)
    head = model.head_matrix()
    add("final_norm", "sfu", -1, ops=4 * model.d_model)
    add(head.name, "flash_npu_gemv", -1,
        weight_bytes=math.ceil(head.elements * wbits / 8),
        ops=2 * head.elements, matrix=head)
    return g


def arithmetic_intensity(model: ModelSpec, quant: QuantizationSpec) -> float:
    """Weight-GeMV ops per weight byte moved for one token (KV excluded)."""
    if model.param_count == 0:
        raise WorkloadError("empty model has no defined arithmetic intensity")
    ops = 2 * model.param_count
    return ops / model.weight_bytes_total(quant)


def reduction_ratio(rows: int, cols: int,
                    quant: QuantizationSpec | None = None) -> float:
    """Input bytes over output bytes of a GeMV, weights counted as input."""
    if rows < 1 or cols < 1:
        raise WorkloadError("matrix dimensions must be >= 1")
    quant = quant or QuantizationSpec()
    in_bytes = rows * cols * quant.weight_bits / 8 + cols * quant.activation_bytes
    out_bytes = rows * quant.activation_bytes
    return in_bytes / out_bytes


_PRESETS = {
    "opt-6.7b": ModelSpec("opt-6.7b", 32, 4096, 16384, 32, 32, 50272,
                          advertised_params=6.7e9),
    "opt-13b": ModelSpec("opt-13b", 40, 5120, 20480, 40, 40, 50272,
                         advertised_params=13.0e9),
    "opt-30b": ModelSpec("opt-30b", 48, 7168, 28672, 56, 56, 50272,
                         advertised_params=30.0e9),
    "opt-66b": ModelSpec("opt-66b", 64, 9216, 36864, 72, 72, 50272,
                         advertised_params=66.0e9),
    "llama2-7b": ModelSpec("llama2-7b", 32, 4096, 11008, 32, 32, 32000,
                           gated_ffn=True, advertised_params=6.74e9),
    "llama2-13b": ModelSpec("llama2-13b", 40, 5120, 13824, 40, 40, 32000,
                            gated_ffn=True, advertised_params=13.02e9),
    "llama2-70b": ModelSpec("llama2-70b", 80, 8192, 28672, 64, 8, 32000,
                            gated_ffn=True, advertised_params=68.98e9),
}

OPT_PRESETS = ("opt-6.7b", "opt-13b", "opt-30b", "opt-66b")
LLAMA_PRESETS = ("llama2-7b", "llama2-13b", "llama2-70b")
ALL_PRESETS = OPT_PRESETS + LLAMA_PRESETS


def model_preset(name: str) -> ModelSpec:
    key = name.lower()
    if key not in _PRESETS:
        raise WorkloadError(
            f"unknown model {name!r}; presets: {', '.join(sorted(_PRESETS))}")
    return _PRESETS[key]


def load_model(text: str) -> ModelSpec:
    """Parse a [model] document in the same key/value style as hwconfig."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise WorkloadError(f"parse error: {exc}") from exc
    if parser.sections() != ["model"]:
        raise WorkloadError("model file must contain exactly one [model] section")
    sec = dict(parser["model"])
    known = {"name", "layer_count", "d_model", "ffn_dim", "head_count",
             "kv_head_count", "vocab_size", "gated_ffn", "advertised_params"}
    for key in sec:
        if key not in known:
            raise WorkloadError(f"unknown key model.{key}")
    try:
        return ModelSpec(
            name=sec.get("name", "custom"),
            layer_count=int(sec["layer_count"]),
            d_model=int(sec["d_model"]),
            ffn_dim=int(sec["ffn_dim"]),
            head_count=int(sec["head_count"]),
            kv_head_count=int(sec.get("kv_head_count", sec["head_count"])),
            vocab_size=int(sec["vocab_size"]),
            gated_ffn=sec.get("gated_ffn", "false").lower() in ("1", "true", "yes"),
            advertised_params=float(sec.get("advertised_params", 0.0)),
        )
    except KeyError as exc:
        raise WorkloadError(f"missing key model.{exc.args[0]}") from exc
