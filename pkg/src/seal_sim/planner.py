"""Criticality-aware partial encryption planning.

Kernel rows are ranked by the l1 sum of their weights; the top
``ceil(ratio * n_x)`` rows of each layer are encrypted together with the
matching input channels, so that no product term mixes an encrypted and a
plaintext operand.

Feature maps are identified by the id of the layer that produces them.
Pool layers and Add layers operate per channel, so all maps joined by them
form one *channel group* that must share a single encrypted channel set; the
Conv/FC layers reading any map of a group are ranked jointly on the sum of
their per-row l1 sums.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import KernelMatrix, Layer, Model

POLICIES = ("paper-default", "none")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ImportanceRanking:
    layer_id: int
    row_sums: tuple[float, ...]
    order: tuple[int, ...]

    def top(self, k: int) -> frozenset[int]:
        return frozenset(self.order[:k])


def _rank(sums: np.ndarray) -> tuple[int, ...]:
    # stable sort on the negated sums keeps ascending row index among ties
    return tuple(int(i) for i in np.argsort(-sums, kind="stable"))


def row_l1_sums(kernel: KernelMatrix) -> np.ndarray:
    return np.abs(kernel.weights.astype(np.float64)).sum(axis=(1, 2, 3))


def row_importance(kernel: KernelMatrix, layer_id: int = -1) -> ImportanceRanking:
    sums = row_l1_sums(kernel)
    return ImportanceRanking(layer_id, tuple(float(s) for s in sums), _rank(sums))


def encrypted_row_count(ratio: float, n_x: int) -> int:
    # round away float noise before ceil so 0.3 * 10 gives 3, not 4
    return min(n_x, math.ceil(round(ratio * n_x, 9)))


@dataclass
class EncryptionPlan:
    ratio: float
    policy: str
    rows: dict[int, frozenset[int]] = field(default_factory=dict)
    full: dict[int, bool] = field(default_factory=dict)
    channels: dict[int, frozenset[int]] = field(default_factory=dict)
    # Maps that are public by construction (the input image); see verify_closure.
    public_maps: frozenset[int] = frozenset()

    def copy(self) -> "EncryptionPlan":
        return EncryptionPlan(self.ratio, self.policy, dict(self.rows), dict(self.full),
                              dict(self.channels), self.public_maps)

    def encrypted_rows(self, layer_id: int) -> frozenset[int]:
        return self.rows.get(layer_id, frozenset())

    def encrypted_channels(self, map_id: int) -> frozenset[int]:
        return self.channels.get(map_id, frozenset())

    def to_json(self) -> str:
        doc = {
            "ratio": self.ratio,
            "policy": self.policy,
            "layers": {str(k): {"rows": sorted(v), "full": bool(self.full.get(k, False))}
                       for k, v in sorted(self.rows.items())},
            "maps": {str(k): sorted(v) for k, v in sorted(self.channels.items())},
            "public_maps": sorted(self.public_maps),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EncryptionPlan":
        doc = json.loads(text)
        rows = {int(k): frozenset(v["rows"]) for k, v in doc["layers"].items()}
        full = {int(k): bool(v["full"]) for k, v in doc["layers"].items()}
        chans = {int(k): frozenset(v) for k, v in doc["maps"].items()}
        return cls(float(doc["ratio"]), doc["policy"], rows, full, chans,
                   frozenset(doc.get("public_maps", [])))

    def __eq__(self, other):
        if not isinstance(other, EncryptionPlan):
            return NotImplemented
        return self.to_json() == other.to_json()


# ---------------------------------------------------------------- channel groups

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass(frozen=True)
class ChannelGroup:
    maps: tuple[int, ...]          # producing-layer ids of the member maps
    consumers: tuple[int, ...]     # Conv/FC layers reading any member map


def channel_groups(model: Model) -> list[ChannelGroup]:
    """Partition feature maps into groups that must share one encrypted channel set."""
    uf = _UnionFind(len(model))
    for l in model.layers:
        if l.kind in ("Pool", "Add"):
            for s in l.sources:
                uf.union(s, l.id)
    members: dict[int, list[int]] = {}
    for l in model.layers:
        if l.kind != "Output":
            members.setdefault(uf.find(l.id), []).append(l.id)
    groups = []
    for root in sorted(members):
        maps = tuple(members[root])
        mapset = set(maps)
        consumers = tuple(l.id for l in model.layers
                          if l.has_weights and l.sources[0] in mapset)
        groups.append(ChannelGroup(maps, consumers))
    return groups


def boundary_layers(model: Model) -> set[int]:
    """First two and last Conv layers plus every FC layer."""
    convs = [l.id for l in model.conv_layers]
    out = set(convs[:2]) | set(convs[-1:])
    out |= {l.id for l in model.layers if l.kind == "FC"}
    return out


# ---------------------------------------------------------------- plan construction

def build_plan(model: Model, ratio: float, boundary_policy: str = "paper-default") -> EncryptionPlan:
    if not 0.0 <= ratio <= 1.0:
        raise PlanError(f"ratio {ratio} out of range [0, 1]")
    if boundary_policy not in POLICIES:
        raise PlanError(f"unknown boundary policy {boundary_policy!r}")

    forced = boundary_layers(model) if boundary_policy == "paper-default" else set()
    plan = EncryptionPlan(ratio=float(ratio), policy=boundary_policy)
    for group in channel_groups(model):
        if not group.consumers:
            continue
        layers = [model[c] for c in group.consumers]
        n_x = layers[0].kernel.n_x
        if any(l.kernel.n_x != n_x for l in layers):
            raise PlanError(f"consumers {group.consumers} of one channel group disagree on n_x")
        if any(c in forced for c in group.consumers):
            chosen = frozenset(range(n_x))
            is_full = True
        else:
            sums = sum(row_l1_sums(l.kernel) for l in layers)
            chosen = frozenset(_rank(sums)[:encrypted_row_count(ratio, n_x)])
            is_full = len(chosen) == n_x and n_x > 0 and ratio == 1.0
        for l in layers:
            plan.rows[l.id] = chosen
            plan.full[l.id] = is_full
    if boundary_policy == "paper-default":
        plan.public_maps = frozenset({model.input_layer.id})
    return propagate_channels(model, plan)


def propagate_channels(model: Model, plan: EncryptionPlan) -> EncryptionPlan:
    """Derive every feature map's encrypted channel set from its consumers' rows.

    Maps with no Conv/FC reader (the final logits) keep whatever set the plan
    already holds.  Public maps are left unencrypted.
    """
    out = plan.copy()
    for group in channel_groups(model):
        if not group.consumers:
            continue
        wanted = {plan.encrypted_rows(c) for c in group.consumers}
        if len(wanted) != 1:
            raise PlanError(
                f"maps {group.maps} feed layers {group.consumers} with different encrypted "
                "row sets; skip/pool connections need one shared set")
        (chosen,) = wanted
        for m in group.maps:
            out.channels[m] = frozenset() if m in plan.public_maps else chosen
    return out


def full_encryption_plan(model: Model) -> EncryptionPlan:
    """Every row, and every channel of every map including the image and logits."""
    plan = EncryptionPlan(ratio=1.0, policy="full")
    for l in model.weight_layers:
        plan.rows[l.id] = frozenset(range(l.kernel.n_x))
        plan.full[l.id] = True
    for l in model.layers:
        if l.kind != "Output":
            plan.channels[l.id] = frozenset(range(l.shape_out.channels))
    return plan


def drop_channel(model: Model, plan: EncryptionPlan, layer_id: int, channel: int) -> EncryptionPlan:
    """Deliberately break closure: layer keeps kernel row ``channel`` encrypted
    while its input channel ``channel`` is left in plaintext.

    If the row was not encrypted it replaces the lowest-ranked encrypted row,
    so the encrypted row count is unchanged.  Only the consuming layer's view
    changes; the producer of the map keeps its own plan.
    """
    layer = model[layer_id]
    if not layer.has_weights:
        raise PlanError(f"layer {layer_id} ({layer.kind}) has no kernel rows")
    if not 0 <= channel < layer.kernel.n_x:
        raise PlanError(f"channel {channel} out of range for layer {layer_id}")
    out = plan.copy()
    rows = set(plan.encrypted_rows(layer_id))
    if channel not in rows:
        order = row_importance(layer.kernel).order
        if rows:
            weakest = max(rows, key=order.index)
            rows.discard(weakest)
        rows.add(channel)
    out.rows[layer_id] = frozenset(rows)
    src = layer.sources[0]
    out.channels[src] = frozenset(rows - {channel})
    return out


# ---------------------------------------------------------------- closure

@dataclass
class ClosureReport:
    violations: list[tuple[int, int, int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [
            {"layer": l, "row": r, "channel": c, "reason": why}
            for l, r, c, why in self.violations]}


def verify_closure(model: Model, plan: EncryptionPlan) -> ClosureReport:
    """Flag every product term of a Conv/FC layer with exactly one encrypted operand.

    Row ``i`` of a kernel multiplies only input channel ``i``.  A public map
    (the input image) is known to the adversary anyway, so encrypted rows
    reading it are acceptable when the layer's whole output is encrypted;
    otherwise the visible output would expose them.
    """
    report = ClosureReport()
    for l in model.weight_layers:
        src = l.sources[0]
        rows = plan.encrypted_rows(l.id)
        chans = plan.encrypted_channels(src)
        public = src in plan.public_maps
        out_all = plan.encrypted_channels(l.id) >= frozenset(range(l.shape_out.channels))
        for i in range(l.kernel.n_x):
            r_enc, c_enc = i in rows, i in chans
            if r_enc == c_enc:
                continue
            if r_enc and public and out_all:
                continue
            why = ("encrypted row multiplies plaintext input channel" if r_enc
                   else "plaintext row multiplies encrypted input channel")
            report.violations.append((l.id, i, i, why))
    # channel groups joined by Pool/Add must agree
    for g in channel_groups(model):
        sets = {plan.encrypted_channels(m) for m in g.maps if m not in plan.public_maps}
        if len(sets) > 1:
            for m in g.maps:
                report.violations.append((m, -1, -1, f"channel set differs inside group {g.maps}"))
    return report


# ---------------------------------------------------------------- solvability oracle

@dataclass
class OracleResult:
    recoverable: bool
    recovered_rows: dict[tuple[int, int], np.ndarray]
    max_rel_error: float = 0.0
    note: str = ""


def forward_linear(model: Model, inputs: np.ndarray) -> dict[int, np.ndarray]:
    """Per-pixel linear forward pass of a 1x1-kernel chain: maps as (pixels, channels)."""
    maps = {model.input_layer.id: np.asarray(inputs, dtype=np.float64)}
    for l in model.layers[1:]:
        x = maps[l.sources[0]]
        if l.has_weights:
            maps[l.id] = x @ l.kernel.weights[:, :, 0, 0].astype(np.float64)
        elif l.kind == "Output":
            maps[l.id] = x
        else:
            raise PlanError(f"oracle supports 1x1 Conv/FC chains only, got {l.kind}")
    return maps


def solvability_oracle(model: Model, plan: EncryptionPlan, inputs: Optional[np.ndarray] = None,
                       seed: int = 0, tol: float = 1e-9) -> OracleResult:
    """Decide which encrypted weights an adversary can solve for from visible data.

    Every encrypted quantity is an unknown: weights of encrypted rows, pixels of
    encrypted channels, and (for terms where both operands are hidden) the
    product vector itself.  Each output channel gives one linear equation per
    pixel.  An encrypted weight is recovered when it is uniquely determined by
    the joint linear system over all layers.
    """
    for l in model.layers:
        if l.has_weights and (l.kernel.kernel_h, l.kernel.kernel_w) != (1, 1):
            raise PlanError("solvability oracle needs 1x1 kernels")
        if l.kind in ("Pool", "Add"):
            raise PlanError("solvability oracle needs a plain chain of weight layers")
    inp = model.input_layer
    if inputs is None:
        rng = np.random.default_rng(seed)
        inputs = rng.standard_normal((inp.shape_out.plane, inp.shape_out.channels))
    maps = forward_linear(model, inputs)
    pixels = maps[inp.id].shape[0]

    def hidden(map_id: int, ch: int) -> bool:
        return map_id in maps and ch in plan.encrypted_channels(map_id)

    # Unknown widths: encrypted weights are scalars, hidden channels and products span all pixels.
    equations: list[tuple[list[tuple[tuple, np.ndarray]], np.ndarray]] = []
    truth: dict[tuple, np.ndarray] = {}
    for l in model.weight_layers:
        src = l.sources[0]
        w = l.kernel.weights[:, :, 0, 0].astype(np.float64)
        x = maps[src]
        rows = plan.encrypted_rows(l.id)
        for j in range(l.kernel.n_y):
            terms: list[tuple[tuple, np.ndarray]] = []
            rhs = np.zeros(pixels)
            if hidden(l.id, j):
                terms.append((("x", l.id, j), -np.ones(pixels)))
                truth[("x", l.id, j)] = maps[l.id][:, j]
            else:
                rhs = maps[l.id][:, j].copy()
            for i in range(l.kernel.n_x):
                x_hid, w_hid = hidden(src, i), i in rows
                if not x_hid and not w_hid:
                    rhs -= x[:, i] * w[i, j]
                elif not x_hid and w_hid:
                    key = ("w", l.id, i, j)
                    terms.append((key, x[:, i]))
                    truth[key] = np.array([w[i, j]])
                elif x_hid and not w_hid:
                    key = ("x", src, i)
                    terms.append((key, np.full(pixels, w[i, j])))
                    truth[key] = x[:, i]
                else:
                    key = ("p", l.id, i, j)
                    terms.append((key, np.ones(pixels)))
                    truth[key] = x[:, i] * w[i, j]
            equations.append((terms, rhs))

    index: dict[tuple, int] = {}
    n_unknowns = 0
    for terms, _ in equations:
        for key, _c in terms:
            if key not in index:
                index[key] = n_unknowns
                n_unknowns += 1 if key[0] == "w" else pixels
    weight_keys = [k for k in index if k[0] == "w"]
    if not weight_keys:
        return OracleResult(False, {}, note="no encrypted weight is multiplied by visible data")

    a = np.zeros((len(equations) * pixels, n_unknowns))
    b = np.zeros(len(equations) * pixels)
    for e, (terms, rhs) in enumerate(equations):
        r0 = e * pixels
        b[r0:r0 + pixels] = rhs
        for key, coef in terms:
            col = index[key]
            if key[0] == "w":
                a[r0:r0 + pixels, col] += coef
            else:
                a[r0:r0 + pixels, col:col + pixels] += np.diag(coef)

    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    rank = int(np.sum(s > tol * max(1.0, s[0] if s.size else 1.0)))
    null = vt[rank:]

    recovered: dict[tuple[int, int], np.ndarray] = {}
    max_err = 0.0
    degenerate = False
    for key in weight_keys:
        col = index[key]
        if null.size and np.max(np.abs(null[:, col])) > 1e-7:
            # undetermined; flag degeneracy when visible data is too thin to pin it
            _, lid, i, _j = key
            if np.linalg.norm(maps[model[lid].sources[0]][:, i]) < tol:
                degenerate = True
            continue
        _, lid, i, j = key
        row = recovered.setdefault((lid, i), np.full(model[lid].kernel.n_y, np.nan))
        row[j] = sol[col]
        ref = truth[key][0]
        max_err = max(max_err, abs(sol[col] - ref) / max(abs(ref), 1e-12))
    note = "visible system is singular for some encrypted weights" if degenerate else ""
    return OracleResult(bool(recovered), recovered, max_err, note)
