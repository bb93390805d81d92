"""Proportional-fair PRB scheduling, traffic generation, and transport blocks.

One scheduler instance runs per transmitter per TTI.  Pending HARQ
retransmissions reserve their original PRB counts first; the remaining PRBs
go one at a time to the backlogged flow maximising instantaneous rate over
average throughput.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PF_FORGETTING = 0.01        # exponential window of ~100 TTIs
PF_RATE_FLOOR = 1.0         # bits/s, keeps the metric finite
SYMBOLS_PER_PRB = 12 * 14   # subcarriers x OFDM symbols per TTI
TB_OVERHEAD = 0.25          # control/pilot share of a transport block


@dataclass(frozen=True, slots=True)
class PfState:
    avg_rate: float = PF_RATE_FLOOR  # bits/s


def pf_metric(inst_rate: float, avg_rate: float) -> float:
    """Classic proportional-fair ratio; the caller keeps avg_rate floored."""
    return inst_rate / max(avg_rate, PF_RATE_FLOOR)


def update_pf(state: PfState, served_bits: int, tti_s: float = 1e-3,
              forgetting: float = PF_FORGETTING) -> PfState:
    """Exponentially averaged throughput; unserved TTIs decay toward the floor."""
    new = (1.0 - forgetting) * state.avg_rate + forgetting * (served_bits / tti_s)
    return PfState(avg_rate=max(new, PF_RATE_FLOOR))


def tb_bits(mcs, n_prb: int, overhead: float = TB_OVERHEAD) -> int:
    """Transport block capacity for an MCS over n PRBs in one TTI."""
    if n_prb < 0:
        raise ValueError("PRB count must be non-negative")
    return int(np.floor(mcs.spectral_efficiency * SYMBOLS_PER_PRB * n_prb * (1.0 - overhead)))


@dataclass(slots=True)
class Packet:
    pid: int
    size_bits: int
    arrival_ms: int
    deadline_ms: int | None      # None = no deadline (streaming)
    unsent: int = -1             # bits not yet placed into a transport block
    inflight: int = 0            # bits in HARQ processes, either hop
    buffered: int = 0            # bits parked at a relay between hops
    delivered: int = 0
    failed: bool = False

    def __post_init__(self):
        if self.unsent < 0:
            self.unsent = self.size_bits

    def outstanding(self) -> int:
        return self.unsent + self.inflight + self.buffered


@dataclass(slots=True)
class TrafficFlow:
    """One downlink flow (safety or video) toward a single vehicle."""

    flow_id: tuple
    kind: str                    # "safety" | "video"
    vehicle_id: int
    packet_bits: int
    period_ms: int
    deadline_ms: int | None
    queue: list[Packet] = field(default_factory=list)
    generated: int = 0
    delivered: int = 0
    expired: int = 0
    dropped: int = 0
    _next_pid: int = 0

    def queued_bits(self) -> int:
        return sum(p.outstanding() for p in self.queue)

    def conserved(self) -> bool:
        return self.generated == self.delivered + self.expired + self.dropped + self.queued_bits()


def make_safety_flow(vehicle_id: int, packet_bits: int = 12800,
                     period_ms: int = 100) -> TrafficFlow:
    return TrafficFlow(flow_id=("safety", vehicle_id), kind="safety", vehicle_id=vehicle_id,
                       packet_bits=packet_bits, period_ms=period_ms, deadline_ms=period_ms)


def make_video_flow(vehicle_id: int, packet_bits: int = 1000,
                    period_ms: int = 1) -> TrafficFlow:
    return TrafficFlow(flow_id=("video", vehicle_id), kind="video", vehicle_id=vehicle_id,
                       packet_bits=packet_bits, period_ms=period_ms, deadline_ms=None)


def generate_traffic(flow: TrafficFlow, now_ms: int) -> list[Packet]:
    """Emit this flow's packet if ``now`` sits on a period boundary."""
    if now_ms % flow.period_ms != 0:
        return []
    deadline = None if flow.deadline_ms is None else now_ms + flow.deadline_ms
    packet = Packet(pid=flow._next_pid, size_bits=flow.packet_bits,
                    arrival_ms=now_ms, deadline_ms=deadline)
    flow._next_pid += 1
    flow.queue.append(packet)
    flow.generated += flow.packet_bits
    return [packet]


@dataclass(slots=True)
class SchedFlow:
    """Scheduler-facing view of one flow at one transmitter."""

    flow_id: tuple
    backlog_bits: int
    avg_rate: float
    retx: list = field(default_factory=list)  # (n_prb, harq handle) pairs


@dataclass(slots=True)
class PrbAllocation:
    tti: int
    entries: dict[int, tuple]    # prb index -> (flow_id, harq handle | None)

    def prbs_for(self, flow_id, new_data_only: bool = False) -> list[int]:
        return [p for p, (fid, h) in self.entries.items()
                if fid == flow_id and (h is None or not new_data_only)]


def schedule_tti(flows: list[SchedFlow], per_prb_rates: dict, prb_count: int,
                 tti: int = 0) -> PrbAllocation:
    """Allocate one TTI's PRBs: retransmissions first, then per-PRB PF argmax.

    ``per_prb_rates[flow_id]`` is the deliverable bits per PRB for that flow,
    either a scalar or a length-``prb_count`` array.  Ties go to the lowest
    flow id; flows whose remaining backlog hits zero drop out mid-TTI.
    """
    entries: dict[int, tuple] = {}
    free = list(range(prb_count))

    for sf in sorted(flows, key=lambda s: s.flow_id):
        for n_prb, handle in sf.retx:
            if len(free) < n_prb:
                continue  # deferred; the engine retries next TTI
            for prb in free[:n_prb]:
                entries[prb] = (sf.flow_id, handle)
            del free[:n_prb]

    candidates = sorted((sf for sf in flows if sf.backlog_bits > 0), key=lambda s: s.flow_id)
    if candidates and free:
        scalar = all(np.isscalar(per_prb_rates[sf.flow_id]) for sf in candidates)
        denom = np.array([max(sf.avg_rate, PF_RATE_FLOOR) for sf in candidates])
        backlog = np.array([float(sf.backlog_bits) for sf in candidates])
        if scalar:
            # flat rate across PRBs: the argmax winner is unchanged until its
            # backlog drains, so grant its PRBs in one chunk
            rate = np.array([float(per_prb_rates[sf.flow_id]) for sf in candidates])
            metric = rate / denom
            pos = 0
            while pos < len(free):
                m = np.where(backlog > 0.0, metric, 0.0)
                best = int(np.argmax(m))  # first max == lowest flow id on ties
                if m[best] <= 0.0:
                    break
                need = int(np.ceil(backlog[best] / rate[best]))
                take = min(need, len(free) - pos)
                for prb in free[pos:pos + take]:
                    entries[prb] = (candidates[best].flow_id, None)
                backlog[best] -= take * rate[best]
                pos += take
        else:
            rates = np.empty((len(candidates), prb_count))
            for i, sf in enumerate(candidates):
                rates[i, :] = per_prb_rates[sf.flow_id]
            metric = rates / denom[:, None]
            for prb in free:
                m = np.where(backlog > 0.0, metric[:, prb], 0.0)
                best = int(np.argmax(m))
                if m[best] <= 0.0:
                    if not (backlog > 0.0).any():
                        break
                    continue
                entries[prb] = (candidates[best].flow_id, None)
                backlog[best] -= rates[best, prb]

    return PrbAllocation(tti=tti, entries=entries)
