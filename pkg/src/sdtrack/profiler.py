"""FLOP counting, firing-rate instrumentation and theoretical energy.

Energy model (MAC-equivalent FLOP units, picojoules)::

    E = T * (e_mac * sum(float layer FLOPs)
             + e_ac * (sum(spike layer FLOPs * fr) + sum(SSA ops)))

SSA ops are reported two ways: ``effective`` (accumulations actually
triggered by the binary Q, K, V operands) and ``literal`` (dense FLOPs).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

from . import autodiff as ad
from .model import ModelConfig, SDTrack
from .nn import Recorder, recording

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
FLOAT_KINDS = ("float_conv", "float_fc")
SPIKE_KINDS = ("spike_conv", "spike_fc")


class MissingFiringStats(KeyError):
    pass


@dataclass(frozen=True)
class LayerFlops:
    layer_id: str
    kind: str
    flops: int

    def __post_init__(self):
        if self.flops < 0:
            raise ValueError("flops must be >= 0")
        if self.kind not in FLOAT_KINDS + SPIKE_KINDS + ("ssa",):
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class FiringStats:
    layer_id: str
    total: int
    nonzero: int

    def __post_init__(self):
        if not 0 <= self.nonzero <= self.total:
            raise ValueError(f"{self.layer_id}: need 0 <= nonzero <= total")

    @property
    def fr(self) -> float:
        return self.nonzero / self.total if self.total else 0.0


@dataclass
class LayerEnergy:
    layer_id: str
    kind: str
    flops: int
    fr: float | None
    ops: float  # operations charged per timestep
    energy_pj: float
    literal_energy_pj: float


@dataclass
class EnergyReport:
    T: int
    e_mac: float
    e_ac: float
    layers: list[LayerEnergy] = field(default_factory=list)
    mac_pj: float = 0.0
    ac_pj: float = 0.0
    total_pj: float = 0.0
    literal_ac_pj: float = 0.0
    literal_total_pj: float = 0.0

    @property
    def total_mj(self) -> float:
        return self.total_pj * 1e-9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_mj"] = self.total_mj
        d["literal_total_mj"] = self.literal_total_pj * 1e-9
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        cols = ["layer_id", "kind", "flops", "fr", "ops", "energy_pj", "literal_energy_pj"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for le in self.layers:
                w.writerow([le.layer_id, le.kind, le.flops, "" if le.fr is None else repr(le.fr),
                            repr(le.ops), repr(le.energy_pj), repr(le.literal_energy_pj)])


def layer_flops(model: SDTrack) -> list[LayerFlops]:
    return [LayerFlops(m.layer_id, m.kind, int(m.flops())) for m in model.layers()]


def count_flops(config: ModelConfig) -> list[LayerFlops]:
    """Per-layer FLOPs from a shape-only model instance."""
    return layer_flops(SDTrack(config, rng=None))


def record_firing(model: SDTrack, z, x, mode: str = "infer", recorder: Recorder | None = None):
    """Run one instrumented forward.

    Returns ``(firing, ssa_ops)``: one :class:`FiringStats` per spike-consuming
    layer (measured on the binary view of its operand) and the effective SSA
    accumulations per sample and virtual timestep, keyed by layer id."""
    with recording(recorder) as rec, ad.no_grad():
        model.forward(z, x, mode)
    firing, ssa_ops = [], {}
    for r in rec.records.values():
        if r.kind == "ssa":
            ssa_ops[r.layer_id] = r.ssa_ops / max(r.calls, 1)
        else:
            firing.append(FiringStats(r.layer_id, r.total, r.nonzero))
    return firing, ssa_ops


def energy(flops: list[LayerFlops], firing: list[FiringStats], T: int, e_mac: float = E_MAC_PJ,
           e_ac: float = E_AC_PJ, ssa_ops: dict[str, float] | None = None) -> EnergyReport:
    """Evaluate the energy equation. ``T`` is the total number of timesteps
    the network runs (T x D for integer-coded neurons)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    fr = {f.layer_id: f.fr for f in firing}
    rep = EnergyReport(T=T, e_mac=e_mac, e_ac=e_ac)
    for lf in flops:
        if lf.kind in FLOAT_KINDS:
            ops, rate, const = float(lf.flops), None, e_mac
            literal = ops
        elif lf.kind in SPIKE_KINDS:
            if lf.layer_id not in fr:
                raise MissingFiringStats(f"no firing statistics for spike layer {lf.layer_id!r}")
            rate, const = fr[lf.layer_id], e_ac
            ops = lf.flops * rate
            literal = ops
        else:
            if ssa_ops is None or lf.layer_id not in ssa_ops:
                raise MissingFiringStats(f"no spike operand counts for attention layer {lf.layer_id!r}")
            ops, rate, const = float(ssa_ops[lf.layer_id]), None, e_ac
            literal = float(lf.flops)
        le = LayerEnergy(lf.layer_id, lf.kind, lf.flops, rate, ops, T * const * ops, T * const * literal)
        rep.layers.append(le)
        if lf.kind in FLOAT_KINDS:
            rep.mac_pj += le.energy_pj
        else:
            rep.ac_pj += le.energy_pj
            rep.literal_ac_pj += le.literal_energy_pj
    rep.total_pj = rep.mac_pj + rep.ac_pj
    rep.literal_total_pj = rep.mac_pj + rep.literal_ac_pj
    return rep


def model_energy(model: SDTrack, z, x, mode: str = "infer") -> EnergyReport:
    """Measure firing on one forward and evaluate the energy report with
    ``T = T_real * D``."""
    firing, ssa_ops = record_firing(model, z, x, mode)
    return energy(layer_flops(model), firing, model.config.total_timesteps, ssa_ops=ssa_ops)
