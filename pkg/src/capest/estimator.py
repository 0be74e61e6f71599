"""Per-link capacity estimation state: running service-time mean, lost-packet
accounting, airtime averaging, and residual-capacity computation.

All durations are microseconds; rates cross the boundary in packets/second.
"""

from __future__ import annotations

from dataclasses import dataclass

from .topo import Link

P_LOSS_CEILING = 1.0 - 1e-3


class NoMeasurementError(RuntimeError):
    """Residual requested from an estimator that has seen no samples."""


@dataclass(frozen=True)
class ResidualEstimate:
    link: Link
    service_rate: float  # packets/s, 1e6 / s_bar
    residual: float  # packets/s, service_rate - lambda; may be negative
    t_bar: float  # us


def lost_packet_service_time(
    time_in_mac: float, w_m_slots: float, slot_us: float, t_s_us: float, p_loss: float
) -> float:
    """Synthetic service sample for a dropped packet.

    The packet already spent time_in_mac in the MAC; on average it would have
    needed a further half maximum window plus one transmission, inflated by the
    expected number of repeats under per-attempt loss p_loss.
    """
    if not 0.0 <= p_loss < 1.0:
        raise ValueError(f"p_loss must be in [0, 1), got {p_loss}")
    return time_in_mac + (w_m_slots * slot_us / 2.0 + t_s_us) / (1.0 - p_loss)


class ServiceEstimator:
    """Running per-link estimate, reset at each iteration boundary.

    The service mean is kept in summation form so it equals the exact
    arithmetic mean of the samples fed since the last reset. The loss tracker
    counts packets handed to the MAC (successes plus drops) and packets
    dropped; synthetic drop samples do not count as sent packets.
    """

    def __init__(self, link: Link = ("", ""), retransmit_limit: int | None = None):
        self.link = link
        self.retransmit_limit = retransmit_limit
        self._sum_s = 0.0
        self.k = 0
        self._sum_t = 0.0
        self.k_t = 0
        self.sent = 0
        self.lost = 0
        self.saturated_lossy = False
        self.queueing_delay_us = 0.0

    @property
    def s_bar(self) -> float:
        return self._sum_s / self.k if self.k else 0.0

    @property
    def t_bar(self) -> float:
        return self._sum_t / self.k_t if self.k_t else 0.0

    @property
    def loss_ratio(self) -> float:
        return self.lost / self.sent if self.sent else 0.0

    def update_service(self, s_last: float) -> None:
        """Fold one successful packet's service time into the running mean."""
        if not s_last > 0:
            raise ValueError(f"service sample must be > 0, got {s_last}")
        self._sum_s += s_last
        self.k += 1
        self.sent += 1

    def _feed_synthetic(self, s: float) -> None:
        self._sum_s += s
        self.k += 1

    def account_lost_packet(
        self, time_in_mac: float, w_m_slots: float, slot_us: float, t_s_us: float
    ) -> float:
        """Fold a MAC-dropped packet in as a synthetic service sample.

        The per-attempt loss probability is recovered from the running drop
        ratio d as p_loss = d**(1/m) for retransmit limit m: a drop means m
        independent attempt losses in a row. Returns the synthetic sample.
        """
        m = self.retransmit_limit
        if m is None or m < 1:
            raise ValueError("lost-packet accounting needs a finite retransmit limit")
        self.lost += 1
        self.sent += 1
        p_loss = self.loss_ratio ** (1.0 / m)
        if p_loss > P_LOSS_CEILING:
            p_loss = P_LOSS_CEILING
            self.saturated_lossy = True
        sample = lost_packet_service_time(time_in_mac, w_m_slots, slot_us, t_s_us, p_loss)
        self._feed_synthetic(sample)
        return sample

    def update_airtime(self, p_last_bytes: float, d_last_bps: float) -> None:
        """Fold one delivered packet's payload airtime into the running mean."""
        if not p_last_bytes > 0 or not d_last_bps > 0:
            raise ValueError("payload size and data rate must be > 0")
        self._sum_t += p_last_bytes * 8.0 / d_last_bps * 1e6
        self.k_t += 1

    def add_queueing_delay(self, delay_us: float) -> None:
        self.queueing_delay_us += delay_us

    def residual(self, lam_pps: float) -> ResidualEstimate:
        """Residual capacity 1/s_bar - lambda, in packets/s."""
        if self.k == 0:
            raise NoMeasurementError(f"link {self.link}: no service samples")
        service_rate = 1e6 / self.s_bar
        return ResidualEstimate(
            link=self.link,
            service_rate=service_rate,
            residual=service_rate - lam_pps,
            t_bar=self.t_bar,
        )

    def reset(self) -> None:
        self._sum_s = 0.0
        self.k = 0
        self._sum_t = 0.0
        self.k_t = 0
        self.sent = 0
        self.lost = 0
        self.saturated_lossy = False
        self.queueing_delay_us = 0.0
