"""Episode traces to ASCII frames and binary PPM images."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..core import Action, GridObservation, dumps_record

CELL_PX = 8
MAX_SHADE_HEIGHT = 4

# RGB per colour id: empty, grey clutter, then the target palette.
PALETTE = np.array(
    [
        (235, 235, 230),
        (128, 128, 128),
        (220, 40, 40),
        (40, 170, 60),
        (40, 80, 220),
        (230, 200, 30),
        (170, 60, 200),
        (240, 130, 30),
        (30, 200, 200),
        (250, 120, 180),
    ],
    dtype=np.float64,
)
FIXTURE_RGB = np.array([(0, 0, 0), (255, 225, 225), (225, 255, 225), (225, 225, 255), (255, 255, 210), (60, 60, 60)], dtype=np.float64)
FIXTURE_CHARS = " ABCDW"


@dataclass
class Frame:
    step: int
    obs: GridObservation
    action: Optional[Action]

    def ascii(self) -> str:
        """Two characters per cell: top colour (``.`` empty, ``g`` grey, digit for
        target colours, fixture letter under an empty cell) then stack height."""
        head = f"step {self.step}"
        if self.action is not None:
            a = self.action
            head += f" {a.high.name} {tuple(a.pick_or_push)}"
            if a.place is not None:
                head += f" -> {tuple(a.place)}"
        if self.obs.held is not None:
            head += f" held={self.obs.held}"
        rows = [head]
        for y in range(self.obs.height):
            cells = []
            for x in range(self.obs.width):
                h = int(self.obs.heights[y, x])
                c = int(self.obs.top_color[y, x])
                fx = int(self.obs.fixtures[y, x])
                if h == 0:
                    top = FIXTURE_CHARS[fx] if fx else "."
                else:
                    top = "g" if c == 1 else str(c)
                cells.append(top + (str(h) if h else " "))
            rows.append(" ".join(cells).rstrip())
        return "\n".join(rows) + "\n"

    def ppm(self) -> bytes:
        """P6 image; filled cells darken with stack height, empty fixture cells show
        the fixture tint."""
        h, w = self.obs.height, self.obs.width
        img = np.empty((h, w, 3))
        heights = self.obs.heights
        colors = PALETTE[self.obs.top_color]
        shade = 1.0 - 0.5 * np.minimum(heights, MAX_SHADE_HEIGHT) / MAX_SHADE_HEIGHT
        img[:] = colors * shade[..., None]
        empty_fx = (heights == 0) & (self.obs.fixtures > 0)
        img[empty_fx] = FIXTURE_RGB[self.obs.fixtures[empty_fx]]
        img = np.repeat(np.repeat(img, CELL_PX, axis=0), CELL_PX, axis=1)
        # One-pixel grid lines keep neighbouring same-colour cells apart.
        img[::CELL_PX, :, :] *= 0.85
        img[:, ::CELL_PX, :] *= 0.85
        pix = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        return f"P6\n{w * CELL_PX} {h * CELL_PX}\n255\n".encode() + pix.tobytes()


def trace_lines(episode: int, trace: list) -> list:
    """Trace records for one episode; ``trace`` is (obs, action) pairs with a final
    (obs, None)."""
    return [
        dumps_record(
            {
                "type": "frame",
                "episode": episode,
                "step": t,
                "obs": obs.to_record(),
                "action": None if a is None else a.to_record(),
            }
        )
        for t, (obs, a) in enumerate(trace)
    ]


def read_frames(lines: Iterable[str], episode: Optional[int] = None) -> dict:
    """Parse a trace stream into ``{episode: [Frame, ...]}``.

    Blank lines and non-frame records are skipped. A line that fails to parse raises
    ``ValueError`` naming its 1-based line number.
    """
    out: dict = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if rec.get("type") != "frame":
                continue
            ep = int(rec["episode"])
            if episode is not None and ep != episode:
                continue
            act = rec["action"]
            frame = Frame(int(rec["step"]), GridObservation.from_record(rec["obs"]), None if act is None else Action.from_record(act))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValueError(f"line {lineno}: corrupt trace record ({exc})") from exc
        frames = out.setdefault(ep, [])
        if frame.step != len(frames):
            raise ValueError(f"line {lineno}: expected step {len(frames)}, got {frame.step}")
        frames.append(frame)
    return out


def render_episode(lines: Iterable[str], episode: int = 0) -> list:
    """Frames of one episode: the initial observation plus one per executed step."""
    frames = read_frames(lines, episode).get(episode)
    if not frames:
        raise ValueError(f"no frames for episode {episode}")
    return frames


def write_frames(frames: list, out_dir, prefix: str = "frame") -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in frames:
        stem = out / f"{prefix}_{f.step:03d}"
        stem.with_suffix(".txt").write_text(f.ascii())
        stem.with_suffix(".ppm").write_bytes(f.ppm())
        paths.append(stem)
    return paths
