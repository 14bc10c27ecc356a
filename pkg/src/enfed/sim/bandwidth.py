"""Back-of-the-envelope cost of sending every diagnosis key to every user."""
from __future__ import annotations

from dataclasses import dataclass

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class BandwidthEstimate:
    per_user_bytes_per_day: float
    aggregate_bytes_per_day: float
    sustained_bits_per_second: float

    def rounded(self) -> dict:
        """Human-scale figures: MB/user/day, PB/day and Tbps."""
        return {
            "per_user_MB_per_day": round(self.per_user_bytes_per_day / 1e6, 1),
            "aggregate_PB_per_day": round(self.aggregate_bytes_per_day / 1e15, 2),
            "sustained_Tbps": round(self.sustained_bits_per_second / 1e12, 2),
        }


def estimate_bandwidth(keys_per_upload: float, key_bytes: float, daily_infections: float,
                       population: float = 1) -> BandwidthEstimate:
    for name, value in (("keys_per_upload", keys_per_upload), ("key_bytes", key_bytes),
                        ("daily_infections", daily_infections), ("population", population)):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    per_user = keys_per_upload * key_bytes * daily_infections
    aggregate = per_user * population
    return BandwidthEstimate(per_user, aggregate, aggregate * 8 / SECONDS_PER_DAY)
