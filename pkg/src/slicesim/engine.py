"""TTI-level downlink engine.

Drives one simulated cell: mobility, periodic re-slicing and relay planning,
proportional-fair scheduling per transmitter, per-PRB SINR with co-channel
interference inside each band, chase-combining HARQ, and metric accumulation.

Link quality reporting is long-term: CQI is the fading-averaged wideband SINR
under a full-load interference assumption, delayed one TTI.  Fast fading only
enters at decode time, drawn per (transmitter, receiver, TTI) from
counter-based streams so that technology variants under the same seed share
channel realisations.
"""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from . import link_abstraction as la
from . import mac_scheduler as mac
from . import relaying
from . import slicing
from .channel import Band, dbm_to_mw, draw_fading, pathloss_v2i, pathloss_v2v, sinr_mrc
from .errors import ConfigError, InvariantError
from .metrics import MetricsAccumulator, ReceptionRecord
from .scenario import Position, generate_drop, pairwise_distances

if TYPE_CHECKING:  # pragma: no cover
    from .simcli import SimConfig

TTI_S = 1e-3
_SLICED = ("ns", "ns_relay")
_RELAYED = ("rsu_relay", "ns_relay")


@dataclass
class RunResult:
    accumulator: MetricsAccumulator
    ledgers: dict          # flow id -> (generated, delivered, expired, dropped, queued)
    n_vehicles: int
    n_video: int
    wall_time_s: float


class _Seg:
    __slots__ = ("packet", "bits", "cancelled")

    def __init__(self, packet, bits):
        self.packet = packet
        self.bits = bits
        self.cancelled = False


class _Buf:
    __slots__ = ("packet", "bits", "ready_tti")

    def __init__(self, packet, bits, ready_tti):
        self.packet = packet
        self.bits = bits
        self.ready_tti = ready_tti


class _Tb:
    __slots__ = ("tb_id", "bearer", "mcs", "n_prb", "segments", "harq", "next_tx")

    def __init__(self, tb_id, bearer, mcs, n_prb, segments):
        self.tb_id = tb_id
        self.bearer = bearer
        self.mcs = mcs
        self.n_prb = n_prb
        self.segments = segments
        self.harq = None       # la.HarqProcess after the first decode
        self.next_tx = 0

    def live_bits(self) -> int:
        return sum(s.bits for s in self.segments if not s.cancelled)


class _Bearer:
    """One schedulable leg: transmitter -> receiving vehicle."""

    __slots__ = ("key", "tx", "flow", "stage", "rx_vid", "pf_i", "pending", "buffer")

    def __init__(self, key, tx, flow, stage, rx_vid):
        self.key = key          # (tx key, flow id, stage)
        self.tx = tx
        self.flow = flow
        self.stage = stage      # "direct" | "hop1" | "hop2"
        self.rx_vid = rx_vid
        self.pf_i = -1
        self.pending = []       # _Tb awaiting retransmission
        self.buffer = []        # _Buf entries (hop2 only)

    def final_stage(self) -> bool:
        return self.stage != "hop1"


class _Tx:
    __slots__ = ("key", "kind", "band", "node", "row", "bearers", "prb_offset")

    def __init__(self, key, kind, band, node):
        self.key = key
        self.kind = kind        # "rsu" | "ap" | "relay"
        self.band = band
        self.node = node        # rsu id or vehicle id
        self.row = -1           # row in that band's gain matrix
        self.bearers = {}       # bearer key -> _Bearer
        self.prb_offset = 0     # cyclic frequency shift applied to grants


class _Engine:
    def __init__(self, config: "SimConfig", trace_dir=None):
        from .simcli import RngStream  # deferred: simcli imports this module

        cfg = config
        if cfg.technology not in ("rsu", "rsu_relay", "ns", "ns_relay"):
            raise ConfigError(f"unknown technology {cfg.technology!r}")
        if not 1 <= cfg.harq_max_attempts <= la.MAX_HARQ_ATTEMPTS:
            raise ConfigError("harq_max_attempts must lie in [1, 4]")
        if cfg.cqi_delay_ttis not in (0, 1):
            raise ConfigError("cqi_delay_ttis must be 0 or 1")
        self.cfg = cfg
        self.rng = RngStream(cfg.seed)
        self.mcs_table = la.McsTable.load(cfg.mcs_table_path or None)
        self.curves = la.MiCurves.load(cfg.mi_curves_path or None)
        self._bits_1prb = np.array(
            [float(mac.tb_bits(e, 1)) for e in self.mcs_table.entries])
        self.mcs_of = np.empty(0, dtype=int)
        self.noise = cfg.noise_power_mw()
        self.n_rx = cfg.rx_antennas
        self.prb_count = cfg.prb_count
        per_prb_split = 10.0 * np.log10(cfg.prb_count)
        self.p_v2i_prb_dbm = cfg.tx_power_v2i_dbm - per_prb_split
        self.p_v2v_prb_dbm = cfg.tx_power_v2v_dbm - per_prb_split

        topo = self.rng.stream("topology")
        self.drop = generate_drop(cfg, topo)
        vehicles = self.drop.vehicles
        if [v.vid for v in vehicles] != list(range(len(vehicles))):
            raise InvariantError("vehicle ids must be dense and ordered")
        if cfg.technology in _SLICED and not any(v.wants_video for v in vehicles):
            raise ConfigError("slicing needs at least one video vehicle in the drop")

        self.n_veh = len(vehicles)
        self.length = self.drop.highway_length
        self.xs = np.array([v.position.x for v in vehicles])
        self.ys = np.array([v.position.y for v in vehicles])
        self.step_per_tti = np.array([v.direction * v.speed * TTI_S for v in vehicles])
        self.rsu_x = np.array([r.position.x for r in self.drop.rsus])
        self.rsu_y = np.array([r.position.y for r in self.drop.rsus])
        self.video_ids = [v.vid for v in vehicles if v.wants_video]

        # static per-drop shadowing, drawn from the topology stream
        self.sh_v2i = cfg.shadowing_sigma_v2i_db * topo.standard_normal(
            (len(self.drop.rsus), self.n_veh))
        upper = np.triu(topo.standard_normal((self.n_veh, self.n_veh)), k=1)
        self.sh_v2v = cfg.shadowing_sigma_v2v_db * (upper + upper.T)

        self.acc = MetricsAccumulator(label=str(cfg.seed))
        self.flows: dict[tuple, mac.TrafficFlow] = {}
        self.unsent: dict[tuple, int] = {}
        for v in vehicles:
            flow = mac.make_safety_flow(v.vid, cfg.safety_bits, cfg.safety_period_ms)
            flow.queue = deque()
            self.flows[flow.flow_id] = flow
            self.unsent[flow.flow_id] = 0
            self.acc.register_vehicle(v.vid, "safety")
            if v.wants_video:
                vflow = mac.make_video_flow(v.vid, cfg.video_bits, cfg.video_period_ms)
                vflow.queue = deque()
                self.flows[vflow.flow_id] = vflow
                self.unsent[vflow.flow_id] = 0
                self.acc.register_vehicle(v.vid, "video")

        self.txs: dict[str, _Tx] = {}
        self.v2v_rows: list[_Tx] = []
        self.flow_bearers: dict[tuple, list] = {}   # fid -> [stage1 bearer | None, hop2 | None]
        self.ap_set: set[int] = set()
        self.serving_rsu = np.zeros(self.n_veh, dtype=int)
        self.pf_avg = np.empty(0)
        self.pf_served = np.empty(0)
        self.cqi_next = np.empty(0)
        self.cqi_groups: list[tuple] = []
        self.cqi_cur = np.empty(0)

        self.g_v2i = np.empty((len(self.drop.rsus), self.n_veh))
        self.g_v2v = np.empty((0, self.n_veh))

        self.cur_groups: dict[str, list] = {}       # tx key -> [intended, successes]
        self.flow_group: dict[tuple, str] = {}
        self._tb_counter = 0
        self._record_pid = 0

        # sidelink transmitters are bursty, so their long-term CQI weights
        # each interferer by its measured duty cycle instead of full load
        # (RSUs really do stream continuously; their estimate stays full-load)
        self.v2v_duty: dict[int, float] = {}        # tx vehicle id -> EMA in [0, 1]
        self.duty_vec = np.empty(0)
        self._act_sum = np.zeros(0)                 # PRB-uses per v2v row, this epoch
        self._act_ttis = 0

        self.trace_dir = trace_dir
        self._trace_files = {}
        if trace_dir is not None:
            self._open_traces()

    # ------------------------------------------------------------------ setup

    def _open_traces(self):
        names = {"relay": "relay_dump.csv", "sinr": "sinr_trace.csv",
                 "delivery": "delivery_log.csv"}
        if self.cfg.technology in _SLICED:
            names["plan"] = "plan_dump.csv"
        headers = {
            "plan": ["time_ms", "cluster_count", "ap_count", "access_points"],
            "relay": ["time_ms", "relay_count", "assignment"],
            "sinr": ["tti", "tx", "rx", "mcs", "attempt", "eff_sinr_db", "bler", "ack"],
            "delivery": ["flow", "packet", "arrival_ms", "outcome", "time_ms"],
        }
        for tag, fname in names.items():
            fh = open(f"{self.trace_dir}/{fname}", "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(headers[tag])
            self._trace_files[tag] = (fh, writer)

    def _trace(self, tag, row):
        entry = self._trace_files.get(tag)
        if entry:
            entry[1].writerow(row)

    def _close_traces(self):
        for fh, _ in self._trace_files.values():
            fh.close()
        self._trace_files = {}

    # ------------------------------------------------------------- main loop

    def run(self) -> RunResult:
        t0 = time.perf_counter()
        try:
            for tti in range(self.cfg.duration_ms):
                self.xs = (self.xs + self.step_per_tti) % self.length
                self._refresh_v2i_gains()
                if tti % self.cfg.reslice_period_ms == 0:
                    self._boundary(tti)
                self._refresh_v2v_gains()
                self._arrivals(tti)
                self._refresh_cqi()
                transmitted = self._schedule_all(tti)
                self._note_v2v_activity(transmitted[1])
                self._decode_all(tti, transmitted)
                self._update_pf()
                self.acc.advance_time(1)
            self._finalize_epoch(self.cfg.duration_ms)
            self._check_conservation()
        finally:
            self._close_traces()
        ledgers = {
            fid: (f.generated, f.delivered, f.expired, f.dropped, f.queued_bits())
            for fid, f in self.flows.items()
        }
        return RunResult(
            accumulator=self.acc,
            ledgers=ledgers,
            n_vehicles=self.n_veh,
            n_video=len(self.video_ids),
            wall_time_s=time.perf_counter() - t0,
        )

    # ----------------------------------------------------------------- gains

    def _refresh_v2i_gains(self):
        dist = pairwise_distances(self.rsu_x, self.rsu_y, self.xs, self.ys, self.length)
        self.g_v2i = dbm_to_mw(self.p_v2i_prb_dbm - pathloss_v2i(dist) - self.sh_v2i)

    def _refresh_v2v_gains(self):
        if not self.v2v_rows:
            self.g_v2v = np.empty((0, self.n_veh))
            return
        tx_vids = np.array([tx.node for tx in self.v2v_rows])
        dist = pairwise_distances(self.xs[tx_vids], self.ys[tx_vids],
                                  self.xs, self.ys, self.length)
        shadow = self.sh_v2v[tx_vids, :]
        self.g_v2v = dbm_to_mw(self.p_v2v_prb_dbm - pathloss_v2v(dist) - shadow)

    def _v2i_longterm_sinr_db(self) -> np.ndarray:
        """Fading-averaged wideband downlink SINR per vehicle, full-load RSUs."""
        idx = np.arange(self.n_veh)
        desired = self.n_rx * self.g_v2i[self.serving_rsu, idx]
        total = self.n_rx * self.g_v2i.sum(axis=0)
        return 10.0 * np.log10(desired / (total - desired + self.noise))

    # -------------------------------------------------------------- boundary

    def _boundary(self, tti):
        self._finalize_epoch(tti)
        self._fold_v2v_duty()
        dist = pairwise_distances(self.rsu_x, self.rsu_y, self.xs, self.ys, self.length)
        self.serving_rsu = np.argmin(dist, axis=0)
        sinr_db = self._v2i_longterm_sinr_db()
        sinr_map = {vid: float(sinr_db[vid]) for vid in range(self.n_veh)}

        plan = None
        if self.cfg.technology in _SLICED:
            snapshot = self._snapshot()
            eligible = slicing.eligible_aps(snapshot, sinr_map, self.cfg.ap_sinr_threshold_db)
            if not eligible:
                eligible = list(self.video_ids)  # degraded fallback, keeps the slice up
            plan = slicing.build_plan(
                snapshot, eligible, self.cfg.sigma_m, tti,
                e_max_cap=self.cfg.eigengap_cap,
                kmeans_restarts=self.cfg.kmeans_restarts,
                plan_lifetime_ms=self.cfg.reslice_period_ms,
            )
            self.acc.ap_counts.append(len(plan.access_points))
            self._trace("plan", [tti, plan.cluster_count, len(plan.access_points),
                                 ";".join(map(str, plan.access_points))])

        relay_plan = None
        if self.cfg.technology in _RELAYED:
            ap_set = set(plan.access_points) if plan else set()
            lows = relaying.identify_low_sinr(self.video_ids, sinr_map,
                                              self.cfg.relay_low_sinr_db)
            low_set = set(lows)
            candidates = [v for v in self.video_ids
                          if v not in ap_set and v not in low_set]
            positions = {vid: Position(float(self.xs[vid]), float(self.ys[vid]))
                         for vid in set(lows) | set(candidates)}
            relay_plan = relaying.build_relay_plan(
                lows, candidates, sinr_map, positions, self.length,
                quality_threshold_db=self.cfg.ap_sinr_threshold_db,
                max_range_m=self.cfg.relay_max_range_m,
                max_clients=self.cfg.relay_max_clients,
                proximity_weight=self.cfg.relay_proximity_weight,
            )
            self.acc.relay_counts.append(len(relay_plan.relays()))
            self._trace("relay", [tti, len(relay_plan.relays()),
                                  ";".join(f"{k}:{v}" for k, v in sorted(relay_plan.assignment.items()))])

        self._rebuild(plan, relay_plan)

    def _snapshot(self):
        vehicles = tuple(
            replace(v, position=Position(float(self.xs[i]), v.position.y))
            for i, v in enumerate(self.drop.vehicles)
        )
        return replace(self.drop, vehicles=vehicles)

    def _rebuild(self, plan, relay_plan):
        cfg = self.cfg
        old_bearers = {}
        for tx in self.txs.values():
            old_bearers.update(tx.bearers)
        old_pf = {b.key: self.pf_avg[b.pf_i] for b in old_bearers.values()}
        old_cqi = {b.key: self.cqi_next[b.pf_i] for b in old_bearers.values()}

        txs: dict[str, _Tx] = {}
        for r in self.drop.rsus:
            txs[f"rsu{r.rid}"] = _Tx(f"rsu{r.rid}", "rsu", Band.V2I, r.rid)
        self.ap_set = set(plan.access_points) if plan else set()
        relay_map = dict(relay_plan.assignment) if relay_plan else {}
        v2v_vids = sorted(self.ap_set | set(relay_map.values()))
        self.v2v_rows = []
        for vid in v2v_vids:
            kind = "ap" if vid in self.ap_set else "relay"
            tx = _Tx(f"{kind}{vid}", kind, Band.V2V, vid)
            tx.row = len(self.v2v_rows)
            txs[tx.key] = tx
            self.v2v_rows.append(tx)
        # every sidelink transmitter starts its grants at PRB 0 otherwise, so
        # concurrent APs/relays would collide on the low PRBs every epoch.
        # v2v_rows is in position order; a coprime stride hands neighbouring
        # transmitters far-apart offsets, so the overlaps that remain when
        # there are more transmitters than PRBs pair spatially distant nodes
        n_v2v = len(self.v2v_rows)
        stride = max(1, round(0.382 * n_v2v))
        while math.gcd(stride, n_v2v) != 1:
            stride += 1
        for k, tx in enumerate(self.v2v_rows):
            tx.prb_offset = ((k * stride) % n_v2v) * self.prb_count // n_v2v
        self.duty_vec = np.array([self.v2v_duty.get(tx.node, 1.0)
                                  for tx in self.v2v_rows])
        self._act_sum = np.zeros(n_v2v)
        self._act_ttis = 0
        for i, tx in enumerate(txs.values()):
            if tx.band is Band.V2I:
                tx.row = tx.node  # rsu id indexes the v2i gain matrix

        flow_bearers: dict[tuple, list] = {}

        def add(tx: _Tx, flow, stage: str, rx_vid: int):
            key = (tx.key, flow.flow_id, stage)
            bearer = _Bearer(key, tx, flow, stage, rx_vid)
            tx.bearers[key] = bearer
            slot = flow_bearers.setdefault(flow.flow_id, [None, None])
            slot[1 if stage == "hop2" else 0] = bearer
            return bearer

        for vid in range(self.n_veh):
            flow = self.flows[("safety", vid)]
            if cfg.technology in _SLICED:
                if vid in self.ap_set:
                    flow_bearers.setdefault(flow.flow_id, [None, None])
                    continue  # the access point holds the payload itself
                ap = plan.assignment[vid]
                add(txs[f"ap{ap}"], flow, "direct", vid)
            else:
                add(txs[f"rsu{self.serving_rsu[vid]}"], flow, "direct", vid)

        for vid in self.video_ids:
            flow = self.flows[("video", vid)]
            if vid in relay_map:
                r = relay_map[vid]
                add(txs[f"rsu{self.serving_rsu[r]}"], flow, "hop1", r)
                kind = "ap" if r in self.ap_set else "relay"
                add(txs[f"{kind}{r}"], flow, "hop2", vid)
            else:
                add(txs[f"rsu{self.serving_rsu[vid]}"], flow, "direct", vid)

        # carry over live state where the leg is unchanged; unwind the rest
        new_bearers = {}
        for tx in txs.values():
            new_bearers.update(tx.bearers)
        n = len(new_bearers)
        self.pf_avg = np.full(n, mac.PF_RATE_FLOOR)
        self.pf_served = np.zeros(n)
        self.cqi_next = np.full(n, np.nan)
        for i, (key, bearer) in enumerate(new_bearers.items()):
            bearer.pf_i = i
            old = old_bearers.get(key)
            if old is not None and old.rx_vid == bearer.rx_vid:
                bearer.pending = old.pending
                bearer.buffer = old.buffer
                for tb in bearer.pending:
                    tb.bearer = bearer
                self.pf_avg[i] = old_pf[key]
                self.cqi_next[i] = old_cqi[key]
                old_bearers.pop(key)
        for key, orphan in old_bearers.items():
            self._unwind(orphan)

        self.txs = txs
        self.flow_bearers = flow_bearers
        self.cqi_cur = None
        self._build_cqi_groups(new_bearers)

    def _unwind(self, bearer: _Bearer):
        """Return a dismissed leg's in-flight and buffered bits to the queue."""
        for tb in bearer.pending:
            for seg in tb.segments:
                if seg.cancelled:
                    continue
                p = seg.packet
                p.inflight -= seg.bits
                if p.failed:
                    bearer.flow.dropped += seg.bits
                else:
                    p.unsent += seg.bits
                    self.unsent[bearer.flow.flow_id] += seg.bits
        for buf in bearer.buffer:
            p = buf.packet
            p.buffered -= buf.bits
            if p.failed:
                bearer.flow.dropped += buf.bits
            else:
                p.unsent += buf.bits
                self.unsent[bearer.flow.flow_id] += buf.bits
        bearer.pending = []
        bearer.buffer = []

    def _build_cqi_groups(self, bearers: dict):
        v2i_idx, v2i_serv, v2i_rx = [], [], []
        v2v_idx, v2v_tx, v2v_rx = [], [], []
        for bearer in bearers.values():
            if bearer.tx.band is Band.V2I:
                v2i_idx.append(bearer.pf_i)
                v2i_serv.append(bearer.tx.row)
                v2i_rx.append(bearer.rx_vid)
            else:
                v2v_idx.append(bearer.pf_i)
                v2v_tx.append(bearer.tx.row)
                v2v_rx.append(bearer.rx_vid)
        self.cqi_groups = [
            ("v2i", np.array(v2i_idx, dtype=int), np.array(v2i_serv, dtype=int),
             np.array(v2i_rx, dtype=int)),
            ("v2v", np.array(v2v_idx, dtype=int), np.array(v2v_tx, dtype=int),
             np.array(v2v_rx, dtype=int)),
        ]

    # -------------------------------------------------------------- traffic

    def _arrivals(self, tti):
        cfg = self.cfg
        sliced = cfg.technology in _SLICED
        for fid, flow in self.flows.items():
            packets = mac.generate_traffic(flow, tti)
            if not packets:
                continue
            packet = packets[0]
            if flow.kind == "safety":
                if sliced and flow.vehicle_id in self.ap_set:
                    # the access point already holds the slice payload
                    packet.unsent = 0
                    packet.delivered = packet.size_bits
                    flow.delivered += packet.size_bits
                    self.acc.add_bits(flow.vehicle_id, "safety", packet.size_bits)
                    self._trace("delivery", [fid, packet.pid, tti, "self", tti])
                else:
                    bearer = self.flow_bearers[fid][0]
                    if self._in_locality(bearer.tx, flow.vehicle_id):
                        group = self.cur_groups.setdefault(bearer.tx.key, [0, 0])
                        group[0] += 1
                        self.flow_group[fid] = bearer.tx.key
                    self.unsent[fid] += packet.size_bits
            else:
                self.unsent[fid] += packet.size_bits
            self._purge(flow)

    def _in_locality(self, tx: _Tx, rx_vid: int) -> bool:
        """Distance filter for PRR accounting; radius 0 keeps every receiver."""
        radius = self.cfg.locality_radius_m
        if radius <= 0.0:
            return True
        if tx.band is Band.V2I:
            tx_x, tx_y = self.rsu_x[tx.row], self.rsu_y[tx.row]
        else:
            tx_x, tx_y = self.xs[tx.node], self.ys[tx.node]
        dx = abs(self.xs[rx_vid] - tx_x)
        dx = min(dx, self.length - dx)
        return float(np.hypot(dx, self.ys[rx_vid] - tx_y)) <= radius

    @staticmethod
    def _purge(flow):
        queue = flow.queue
        while queue and queue[0].outstanding() == 0:
            queue.popleft()

    # ------------------------------------------------------------------- cqi

    def _note_v2v_activity(self, acts):
        self._act_ttis += 1
        act = acts.get(Band.V2V)
        if act is not None:
            self._act_sum += act.sum(axis=1)

    def _fold_v2v_duty(self):
        """Blend last epoch's measured sidelink duty cycle into the CQI weights."""
        if self._act_ttis == 0:
            return
        sample = self._act_sum / (self._act_ttis * self.prb_count)
        for tx, frac in zip(self.v2v_rows, sample):
            prev = self.v2v_duty.get(tx.node, 1.0)
            self.v2v_duty[tx.node] = 0.5 * prev + 0.5 * float(frac)

    def _refresh_cqi(self):
        new = np.empty_like(self.pf_avg)
        for band, idx, tx_rows, rx in self.cqi_groups:
            if len(idx) == 0:
                continue
            if band == "v2i":
                g = self.g_v2i
                desired = self.n_rx * g[tx_rows, rx]
                interference = self.n_rx * g.sum(axis=0)[rx] - desired
            else:
                g = self.g_v2v
                desired = self.n_rx * g[tx_rows, rx]
                interference = (self.n_rx * (self.duty_vec @ g)[rx]
                                - self.duty_vec[tx_rows] * desired)
            new[idx] = 10.0 * np.log10(desired / (interference + self.noise))
        if self.cfg.cqi_delay_ttis == 0:
            self.cqi_cur = new
        else:
            prev = self.cqi_next
            self.cqi_cur = np.where(np.isnan(prev), new, prev)
        self.cqi_next = new
        # whole-array counterpart of select_mcs(), one searchsorted per TTI
        self.mcs_of = np.maximum(
            np.searchsorted(self.mcs_table._refs, self.cqi_cur, side="right") - 1, 0)

    # -------------------------------------------------------------- schedule

    def _sendable(self, bearer: _Bearer, tti: int) -> int:
        if bearer.stage == "hop2":
            return sum(b.bits for b in bearer.buffer if b.ready_tti <= tti)
        return self.unsent[bearer.flow.flow_id]

    def _schedule_all(self, tti):
        transmitted = []
        acts = {}
        for tx in self.txs.values():
            sched_flows = []
            rates = {}
            lookup = {}
            for key in sorted(tx.bearers):
                bearer = tx.bearers[key]
                retx = [(tb.n_prb, tb) for tb in bearer.pending if tb.next_tx <= tti]
                backlog = self._sendable(bearer, tti)
                if not retx and backlog <= 0:
                    continue
                mi = self.mcs_of[bearer.pf_i]
                mcs = self.mcs_table[mi]
                sid = key[1:]  # (flow id, stage) is unique within one transmitter
                sched_flows.append(mac.SchedFlow(
                    flow_id=sid, backlog_bits=backlog,
                    avg_rate=float(self.pf_avg[bearer.pf_i]), retx=retx))
                rates[sid] = self._bits_1prb[mi]
                lookup[sid] = (bearer, mcs)
            if not sched_flows:
                continue
            alloc = mac.schedule_tti(sched_flows, rates, self.prb_count, tti=tti)
            act = acts.get(tx.band)
            if act is None:
                rows = len(self.drop.rsus) if tx.band is Band.V2I else len(self.v2v_rows)
                act = acts[tx.band] = np.zeros((rows, self.prb_count))

            by_tb: dict = {}
            handles: dict = {}
            for prb, (sid, handle) in alloc.entries.items():
                group = (sid, -1 if handle is None else handle.tb_id)
                handles[group] = handle
                by_tb.setdefault(group, []).append(prb)
            for group in sorted(by_tb):
                sid, _ = group
                handle = handles[group]
                prbs = by_tb[group]
                bearer, mcs = lookup[sid]
                if tx.prb_offset:
                    prbs = [(tx.prb_offset + p) % self.prb_count for p in prbs]
                prbs = sorted(prbs)
                if handle is not None:
                    tb = handle
                    bearer.pending.remove(tb)
                else:
                    tb = self._fill_tb(bearer, mcs, len(prbs), tti)
                    if tb is None:
                        continue
                act[tx.row, prbs] = 1.0
                transmitted.append((tb, prbs))
        return transmitted, acts

    def _fill_tb(self, bearer: _Bearer, mcs, n_prb: int, tti: int):
        capacity = mac.tb_bits(mcs, n_prb)
        segments = []
        flow = bearer.flow
        if bearer.stage == "hop2":
            for buf in bearer.buffer:
                if capacity <= 0:
                    break
                if buf.ready_tti > tti or buf.bits <= 0:
                    continue
                take = min(buf.bits, capacity)
                buf.bits -= take
                buf.packet.buffered -= take
                buf.packet.inflight += take
                segments.append(_Seg(buf.packet, take))
                capacity -= take
            bearer.buffer = [b for b in bearer.buffer if b.bits > 0]
        else:
            self._purge(flow)
            for packet in flow.queue:
                if capacity <= 0:
                    break
                if packet.failed or packet.unsent <= 0:
                    continue
                take = min(packet.unsent, capacity)
                packet.unsent -= take
                packet.inflight += take
                self.unsent[flow.flow_id] -= take
                segments.append(_Seg(packet, take))
                capacity -= take
        if not segments:
            return None
        self._tb_counter += 1
        return _Tb(self._tb_counter, bearer, mcs, n_prb, segments)

    # ---------------------------------------------------------------- decode

    def _decode_all(self, tti, scheduled):
        transmitted, acts = scheduled
        if not transmitted:
            return
        interference = {}
        for band, act in acts.items():
            g = self.g_v2i if band is Band.V2I else self.g_v2v
            interference[band] = act.T @ (self.n_rx * g)  # (n_prb, n_veh)

        link_uses: dict = {}
        for tb, prbs in transmitted:
            bearer = tb.bearer
            tx = bearer.tx
            rx = bearer.rx_vid
            g = (self.g_v2i if tx.band is Band.V2I else self.g_v2v)[tx.row, rx]
            # one stream per link per TTI; rare second TBs on a link get their own
            use = link_uses.get((tx.key, rx), 0)
            link_uses[(tx.key, rx)] = use + 1
            if use == 0:
                gen = self.rng.derive("link", tx.key, rx, tti)
            else:
                gen = self.rng.derive("link", tx.key, rx, tti, use)
            fading = draw_fading(gen, self.n_rx, tb.n_prb)
            desired = g * fading.power()
            others = interference[tx.band][prbs, rx] - self.n_rx * g
            sinr = np.asarray(sinr_mrc(desired, [others[None, :]], self.noise))
            if tb.harq is None:
                tb.harq = la.HarqProcess(tb.tb_id, tb.mcs, 1, sinr)
            else:
                tb.harq = la.harq_combine(tb.harq, sinr)
            eff = la.miesm_effective_sinr(tb.harq.accumulated_sinr,
                                          tb.mcs.modulation_order, self.curves)
            eff_db = 10.0 * np.log10(max(eff, 1e-30))
            p_err = la.bler(eff_db, tb.mcs)
            ack = la.decode_attempt(gen, p_err)
            self._trace("sinr", [tti, tx.key, rx, tb.mcs.index, tb.harq.attempt,
                                 f"{eff_db:.3f}", f"{p_err:.4f}", int(ack)])
            self.pf_served[bearer.pf_i] += tb.live_bits()
            if ack:
                self._ack_tb(bearer, tb, tti)
            elif tb.harq.attempt >= self.cfg.harq_max_attempts:
                self._drop_tb(bearer, tb, tti)
            else:
                tb.next_tx = tti + self.cfg.harq_rtt_ttis
                bearer.pending.append(tb)

    def _ack_tb(self, bearer: _Bearer, tb: _Tb, tti):
        flow = bearer.flow
        for seg in tb.segments:
            if seg.cancelled:
                continue
            p = seg.packet
            p.inflight -= seg.bits
            if bearer.stage == "hop1":
                p.buffered += seg.bits
                hop2 = self.flow_bearers[flow.flow_id][1]
                hop2.buffer.append(_Buf(p, seg.bits,
                                        tti + 1 + relaying.STORE_AND_FORWARD_TTIS))
                continue
            p.delivered += seg.bits
            flow.delivered += seg.bits
            self.acc.add_bits(flow.vehicle_id, flow.kind, seg.bits)
            if p.delivered == p.size_bits and not p.failed:
                if flow.kind == "safety":
                    group_key = self.flow_group.get(flow.flow_id)
                    if group_key is not None:
                        self.cur_groups[group_key][1] += 1
                else:
                    self._record_pid += 1
                    self.acc.add_record(ReceptionRecord(self._record_pid, "video", 1, 1))
                self._trace("delivery", [flow.flow_id, p.pid, p.arrival_ms, "ok", tti])
        self._purge(flow)

    def _drop_tb(self, bearer: _Bearer, tb: _Tb, tti):
        flow = bearer.flow
        for seg in tb.segments:
            if seg.cancelled:
                continue
            p = seg.packet
            p.inflight -= seg.bits
            flow.dropped += seg.bits
            if not p.failed:
                p.failed = True
                flow.dropped += p.unsent + p.buffered
                self.unsent[flow.flow_id] -= p.unsent
                p.unsent = 0
                if p.buffered:
                    p.buffered = 0
                    hop2 = self.flow_bearers[flow.flow_id][1]
                    if hop2 is not None:
                        hop2.buffer = [b for b in hop2.buffer if b.packet is not p]
                if flow.kind == "video":
                    self._record_pid += 1
                    self.acc.add_record(ReceptionRecord(self._record_pid, "video", 1, 0))
                self._trace("delivery", [flow.flow_id, p.pid, p.arrival_ms, "drop", tti])
        self._purge(flow)

    # --------------------------------------------------------------- windows

    def _finalize_epoch(self, tti):
        """Expire the previous safety epoch and emit its reception records."""
        if tti == 0:
            self.cur_groups = {}
            self.flow_group = {}
            return
        period = self.cfg.safety_period_ms
        for vid in range(self.n_veh):
            flow = self.flows[("safety", vid)]
            for p in flow.queue:
                if p.outstanding() == 0 or p.arrival_ms > tti - period:
                    continue
                flow.expired += p.unsent
                self.unsent[flow.flow_id] -= p.unsent
                p.unsent = 0
                p.failed = True
                bearer = self.flow_bearers.get(flow.flow_id, [None, None])[0]
                if bearer is not None:
                    for tb in bearer.pending:
                        for seg in tb.segments:
                            if not seg.cancelled and seg.packet is p:
                                seg.cancelled = True
                                p.inflight -= seg.bits
                                flow.expired += seg.bits
                    bearer.pending = [tb for tb in bearer.pending
                                      if any(not s.cancelled for s in tb.segments)]
                self._trace("delivery", [flow.flow_id, p.pid, p.arrival_ms, "expired", tti])
            self._purge(flow)
        for tx_key in sorted(self.cur_groups):
            intended, successes = self.cur_groups[tx_key]
            if intended < 1:
                continue
            self._record_pid += 1
            self.acc.add_record(ReceptionRecord(self._record_pid, "safety",
                                                intended, successes))
        self.cur_groups = {}
        self.flow_group = {}

    def _update_pf(self):
        if len(self.pf_avg):
            alpha = mac.PF_FORGETTING
            self.pf_avg = np.maximum(
                (1.0 - alpha) * self.pf_avg + alpha * (self.pf_served / TTI_S),
                mac.PF_RATE_FLOOR)
            self.pf_served[:] = 0.0

    # ------------------------------------------------------------ invariants

    def _check_conservation(self):
        for fid, flow in self.flows.items():
            queued = flow.queued_bits()
            total = flow.delivered + flow.expired + flow.dropped + queued
            if total != flow.generated:
                raise InvariantError(
                    f"bit ledger broken for {fid}: generated={flow.generated} "
                    f"delivered={flow.delivered} expired={flow.expired} "
                    f"dropped={flow.dropped} queued={queued}")
            live_unsent = sum(p.unsent for p in flow.queue)
            if live_unsent != self.unsent[fid]:
                raise InvariantError(f"unsent counter drifted for {fid}")
            if min(flow.generated, flow.delivered, flow.expired, flow.dropped, queued) < 0:
                raise InvariantError(f"negative ledger entry for {fid}")


def simulate(config: "SimConfig", trace_dir=None) -> RunResult:
    """Run one cell and return its accumulated metrics and flow ledgers."""
    return _Engine(config, trace_dir=trace_dir).run()
