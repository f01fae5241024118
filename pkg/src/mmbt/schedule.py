"""Stage schedules: the declarative per-block layout of an encoder.

A schedule lists, block by block, the output channel width, the expected
token grid, whether attention pools its queries, and the pooling strides.
Everything else (patch-embed stride and padding, per-block input grids,
head counts, stage grouping for relative-position tables) is derived here
and validated, so the encoder builder and the cost accountant consume one
consistent layout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass(frozen=True)
class PatchEmbed:
    channels: int
    kernel: tuple[int, ...]
    grid: tuple[int, ...]


@dataclass(frozen=True)
class BlockSpec:
    channels: int                  # output width
    grid: tuple[int, ...]          # output token grid
    attention: str                 # "plain" | "pooled"
    q_stride: tuple[int, ...]
    kv_stride: tuple[int, ...]
    heads: int | None = None       # default: in_channels // head_width
    mlp_ratio: int | None = None


@dataclass(frozen=True)
class StageSchedule:
    name: str
    axes: tuple[str, ...]
    input_channels: int
    input_extents: tuple[int, ...]
    patch: PatchEmbed
    blocks: tuple[BlockSpec, ...]
    head_width: int
    mlp_ratio: int
    raw: dict = field(compare=False, repr=False, default_factory=dict)

    @property
    def rank(self) -> int:
        return len(self.axes)


@dataclass(frozen=True)
class BlockLayout:
    """Fully derived shapes for one block."""
    index: int
    stage: int
    in_channels: int
    out_channels: int
    in_grid: tuple[int, ...]
    q_grid: tuple[int, ...]
    kv_grid: tuple[int, ...]
    out_grid: tuple[int, ...]
    q_stride: tuple[int, ...]
    kv_stride: tuple[int, ...]
    heads: int
    head_dim: int
    mlp_ratio: int
    pooled: bool


@dataclass(frozen=True)
class StageLayout:
    """One run of blocks whose attention operates at the same width."""
    index: int
    channels: int
    heads: int
    head_dim: int
    grid: tuple[int, ...]          # grid at stage entry; rel tables sized 2e-1 per axis
    block_indices: tuple[int, ...]

    @property
    def rel_extents(self) -> tuple[int, ...]:
        return tuple(2 * e - 1 for e in self.grid)


@dataclass(frozen=True)
class Layout:
    patch_stride: tuple[int, ...]
    patch_padding: tuple[tuple[int, int], ...]
    patch_grid: tuple[int, ...]
    blocks: tuple[BlockLayout, ...]
    stages: tuple[StageLayout, ...]

    @property
    def final_channels(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def final_grid(self) -> tuple[int, ...]:
        return self.blocks[-1].out_grid


def _tup(v) -> tuple[int, ...]:
    return tuple(int(x) for x in v)


def solve_patch_geometry(in_extents, kernel, grid):
    """Stride and padding that map the input onto the declared token grid.

    Stride is the integer ratio of extents; padding is the smallest total
    that makes the cross-correlation output land exactly on the grid.
    """
    stride, padding = [], []
    for ax, (n, k, g) in enumerate(zip(in_extents, kernel, grid)):
        s = max(1, n // g)
        total = max(0, (g - 1) * s + k - n)
        out = (n + total - k) // s + 1
        if out != g:
            raise ConfigurationError(
                f"patch embed axis {ax}: input {n}, kernel {k}, stride {s}, "
                f"padding {total} yields grid {out}, schedule declares {g}"
            )
        stride.append(s)
        padding.append((total // 2, total - total // 2))
    return tuple(stride), tuple(padding)


def load_schedule(source) -> StageSchedule:
    """Parse a schedule from a file path, shipped name, or dict."""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        if not path.exists():
            path = builtin_schedule_path(str(source))
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    try:
        axes = tuple(str(a) for a in raw["axes"])
        patch = PatchEmbed(
            channels=int(raw["patch_embed"]["channels"]),
            kernel=_tup(raw["patch_embed"]["kernel"]),
            grid=_tup(raw["patch_embed"]["grid"]),
        )
        blocks = []
        for spec in raw["blocks"]:
            count = int(spec.get("repeat", 1))
            for _ in range(count):
                blocks.append(BlockSpec(
                    channels=int(spec["channels"]),
                    grid=_tup(spec["grid"]),
                    attention=str(spec.get("attention", "plain")),
                    q_stride=_tup(spec.get("q_stride", [1] * len(axes))),
                    kv_stride=_tup(spec.get("kv_stride", [1] * len(axes))),
                    heads=int(spec["heads"]) if "heads" in spec else None,
                    mlp_ratio=int(spec["mlp_ratio"]) if "mlp_ratio" in spec else None,
                ))
        schedule = StageSchedule(
            name=str(raw.get("name", "unnamed")),
            axes=axes,
            input_channels=int(raw["input"]["channels"]),
            input_extents=_tup(raw["input"]["extents"]),
            patch=patch,
            blocks=tuple(blocks),
            head_width=int(raw.get("head_width", 96)),
            mlp_ratio=int(raw.get("mlp_ratio", 4)),
            raw=raw,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed schedule: missing or bad field {exc}") from exc
    derive_layout(schedule)  # validate eagerly
    return schedule


def derive_layout(schedule: StageSchedule, input_extents=None) -> Layout:
    """Derive per-block shapes, validating each consistency rule in order.

    ``input_extents`` overrides the schedule's declared input (grids are
    re-derived with the default stride/padding policy), which lets the
    cost model answer what-if questions symbolically.
    """
    rank = schedule.rank
    declared = input_extents is None
    extents = schedule.input_extents if declared else _tup(input_extents)
    if len(extents) != rank:
        raise ConfigurationError(f"input rank {len(extents)} != schedule rank {rank}")

    stride, padding = solve_patch_geometry(
        schedule.input_extents, schedule.patch.kernel, schedule.patch.grid
    )
    if declared:
        patch_grid = schedule.patch.grid
    else:
        patch_grid = tuple(
            (n + p[0] + p[1] - k) // s + 1
            for n, p, k, s in zip(extents, padding, schedule.patch.kernel, stride)
        )

    blocks: list[BlockLayout] = []
    in_ch, in_grid = schedule.patch.channels, patch_grid
    for i, spec in enumerate(schedule.blocks):
        if len(spec.grid) != rank or len(spec.q_stride) != rank or len(spec.kv_stride) != rank:
            raise ConfigurationError(f"block {i}: grid/stride rank != {rank}")
        pooled = spec.attention == "pooled"
        if spec.attention not in ("plain", "pooled"):
            raise ConfigurationError(f"block {i}: unknown attention kind {spec.attention!r}")
        if not pooled and any(s != 1 for s in spec.q_stride):
            raise ConfigurationError(f"block {i}: plain attention cannot carry q_stride {spec.q_stride}")
        if pooled and all(s == 1 for s in spec.q_stride):
            raise ConfigurationError(f"block {i}: pooled attention requires a q_stride > 1")
        for ax in range(rank):
            if in_grid[ax] % spec.q_stride[ax] != 0:
                raise ConfigurationError(
                    f"block {i}: q_stride {spec.q_stride} does not divide grid {in_grid}"
                )
            if in_grid[ax] % spec.kv_stride[ax] != 0:
                raise ConfigurationError(
                    f"block {i}: kv_stride {spec.kv_stride} does not divide grid {in_grid}"
                )
        q_grid = tuple(g // s for g, s in zip(in_grid, spec.q_stride))
        if declared and q_grid != spec.grid:
            raise ConfigurationError(
                f"block {i}: q_stride {spec.q_stride} maps grid {in_grid} to {q_grid}, "
                f"schedule declares {spec.grid}"
            )
        if spec.channels != in_ch and not pooled:
            raise ConfigurationError(
                f"block {i}: channel change {in_ch}->{spec.channels} outside a pooled block"
            )
        heads = spec.heads if spec.heads is not None else max(1, in_ch // schedule.head_width)
        if in_ch % heads != 0:
            raise ConfigurationError(f"block {i}: {heads} heads do not divide width {in_ch}")
        kv_grid = tuple(g // s for g, s in zip(in_grid, spec.kv_stride))
        blocks.append(BlockLayout(
            index=i,
            stage=-1,
            in_channels=in_ch,
            out_channels=spec.channels,
            in_grid=in_grid,
            q_grid=q_grid,
            kv_grid=kv_grid,
            out_grid=q_grid,
            q_stride=spec.q_stride,
            kv_stride=spec.kv_stride,
            heads=heads,
            head_dim=in_ch // heads,
            mlp_ratio=spec.mlp_ratio if spec.mlp_ratio is not None else schedule.mlp_ratio,
            pooled=pooled,
        ))
        in_ch, in_grid = spec.channels, q_grid

    # group consecutive blocks by attention width into stages
    stages: list[StageLayout] = []
    start = 0
    for i in range(1, len(blocks) + 1):
        if i == len(blocks) or blocks[i].in_channels != blocks[start].in_channels:
            members = blocks[start:i]
            stages.append(StageLayout(
                index=len(stages),
                channels=members[0].in_channels,
                heads=members[0].heads,
                head_dim=members[0].head_dim,
                grid=members[0].in_grid,
                block_indices=tuple(b.index for b in members),
            ))
            for b in members:
                object.__setattr__(b, "stage", len(stages) - 1)
            start = i
    for st in stages:
        for bi in st.block_indices:
            if blocks[bi].heads != st.heads:
                raise ConfigurationError(
                    f"block {bi}: {blocks[bi].heads} heads differ from stage {st.index} ({st.heads})"
                )
    return Layout(
        patch_stride=stride,
        patch_padding=padding,
        patch_grid=patch_grid,
        blocks=tuple(blocks),
        stages=tuple(stages),
    )


def schedule_hash(schedule: StageSchedule) -> str:
    """Stable content hash used to pin checkpoints to their architecture."""
    payload = {
        "axes": schedule.axes,
        "input": [schedule.input_channels, schedule.input_extents],
        "patch": [schedule.patch.channels, schedule.patch.kernel, schedule.patch.grid],
        "head_width": schedule.head_width,
        "mlp_ratio": schedule.mlp_ratio,
        "blocks": [
            [b.channels, b.grid, b.attention, b.q_stride, b.kv_stride, b.heads, b.mlp_ratio]
            for b in schedule.blocks
        ],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def builtin_schedule_path(name: str) -> Path:
    """Path of a schedule shipped with the package (e.g. 'mat', 'ast')."""
    stem = name.removesuffix(".schedule")
    ref = resources.files("mmbt") / "schedules" / f"{stem}.schedule"
    path = Path(str(ref))
    if not path.exists():
        raise ConfigurationError(f"no schedule file or builtin named {name!r}")
    return path
