"""Per-level layer schedules: module repetitions, fixed 2D widths, stem widths."""
from __future__ import annotations

from dataclasses import dataclass, field

TWO_D = "2d"
TWO_PLUS_ONE_D = "2plus1d"


def module_kinds(m: float) -> list[str]:
    """Alternating 2D / (2+1)D module pattern for repetition count ``m``.

    ``m`` counts (2D, (2+1)D) pairs; a trailing ``.5`` adds one final 2D
    module, so m=1.5 gives [2d, 2plus1d, 2d].
    """
    n = round(2 * m)
    if n < 1 or abs(n - 2 * m) > 1e-9:
        raise ValueError(f"module repetition must be a positive multiple of 0.5, got {m}")
    return [TWO_D if i % 2 == 0 else TWO_PLUS_ONE_D for i in range(n)]


@dataclass(frozen=True)
class LayerSchedule:
    m_per_level: dict[int, float]
    D_per_level: dict[int, int]
    stem_channels: dict[int, int] = field(default_factory=lambda: {2: 8, 4: 4})
    expansion: int = 4
    stem_spatial_kernel: int = 7
    stem_temporal_taps: int = 5
    block_temporal_taps: int = 3

    def modules(self, level: int) -> list[str]:
        if level not in self.m_per_level:
            raise KeyError(f"schedule has no module count for level {level}")
        return module_kinds(self.m_per_level[level])

    def width(self, level: int) -> int:
        if level not in self.D_per_level:
            raise KeyError(f"schedule has no 2D width for level {level}")
        return self.D_per_level[level]

    def stem_width(self, n_stems: int) -> int:
        if n_stems in self.stem_channels:
            return self.stem_channels[n_stems]
        # fall back to the closest configured stem count
        key = min(self.stem_channels, key=lambda k: (abs(k - n_stems), k))
        return self.stem_channels[key]

    def to_dict(self) -> dict:
        return {
            "m_per_level": {str(k): v for k, v in self.m_per_level.items()},
            "D_per_level": {str(k): v for k, v in self.D_per_level.items()},
            "stem_channels": {str(k): v for k, v in self.stem_channels.items()},
            "expansion": self.expansion,
            "stem_spatial_kernel": self.stem_spatial_kernel,
            "stem_temporal_taps": self.stem_temporal_taps,
            "block_temporal_taps": self.block_temporal_taps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSchedule":
        return cls(
            m_per_level={int(k): float(v) for k, v in d["m_per_level"].items()},
            D_per_level={int(k): int(v) for k, v in d["D_per_level"].items()},
            stem_channels={int(k): int(v) for k, v in d.get("stem_channels", {"2": 8, "4": 4}).items()},
            expansion=int(d.get("expansion", 4)),
            stem_spatial_kernel=int(d.get("stem_spatial_kernel", 7)),
            stem_temporal_taps=int(d.get("stem_temporal_taps", 5)),
            block_temporal_taps=int(d.get("block_temporal_taps", 3)),
        )


DESK_SCHEDULE = LayerSchedule(
    m_per_level={1: 0.5, 2: 1.0, 3: 1.0, 4: 0.5},
    D_per_level={1: 8, 2: 16, 3: 32, 4: 64},
)

# Full-size 50-layer configuration: 9, 12, 18 and 9 conv layers per block.
FULL_SCALE_SCHEDULE_50 = LayerSchedule(
    m_per_level={1: 1.5, 2: 2.0, 3: 3.0, 4: 1.5},
    D_per_level={1: 64, 2: 128, 3: 256, 4: 512},
    stem_channels={2: 64, 4: 32},
)

FULL_SCALE_SCHEDULE_101 = LayerSchedule(
    m_per_level={1: 1.5, 2: 2.0, 3: 11.5, 4: 1.5},
    D_per_level={1: 64, 2: 128, 3: 256, 4: 512},
    stem_channels={2: 64, 4: 32},
)

DESK_BUDGET = {1: 16, 2: 32, 3: 64, 4: 128}
# per-level channel sums implied by the published 50-layer table
FULL_SCALE_BUDGET = {1: 128, 2: 256, 3: 512, 4: 512}
