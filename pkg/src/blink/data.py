"""Synthetic scene generator, quadrant cropping, and dataset files.

A scene is a noisy image with one marked target block (solid color plus a
small white center dot) and a few unmarked distractor blocks. The query asks
for the target's color; the answer is the matching color token. Blocks are
aligned to the visual-token grid and placed so the target never straddles a
patch boundary for any supported patch count (2, 3 or 4 per side).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import bilinear_resize

DATA_MAGIC = b"BLINKDATA1"

# Vocabulary (64 ids; the model's vocab_size must be >= VOCAB_USED)
PAD, BOS = 0, 1
COLOR_BASE = 2
N_COLORS = 8
Q_WHAT, Q_COLOR, Q_TARGET = 10, 11, 12
VOCAB_USED = 13

TOKEN_NAMES = {PAD: "<pad>", BOS: "<bos>", Q_WHAT: "what", Q_COLOR: "color", Q_TARGET: "target"}
for _c in range(N_COLORS):
    TOKEN_NAMES[COLOR_BASE + _c] = f"color{_c}"

PALETTE = np.array(
    [
        [1.0, 0.1, 0.1],
        [0.1, 1.0, 0.1],
        [0.1, 0.1, 1.0],
        [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0],
        [0.1, 1.0, 1.0],
        [1.0, 0.55, 0.1],
        [0.55, 0.1, 1.0],
    ],
    dtype=np.float32,
)

QUERY_IDS = np.array([Q_WHAT, Q_COLOR, Q_TARGET], dtype=np.int64)

QUADRANTS = ("TL", "TR", "BL", "BR")

DIFFICULTY_PRESETS = {
    "easy": {"noise": 0.05, "distractors": (0, 1), "marker_gain": 1.0},
    "medium": {"noise": 0.2, "distractors": (1, 2), "marker_gain": 1.0},
    "hard": {"noise": 0.45, "distractors": (1, 3), "marker_gain": 0.9},
}

BLOCK_TOKENS = 2  # target/distractor blocks span 2x2 visual tokens


class DataFormatError(ValueError):
    """Corrupt dataset index or blob."""


def token_name(token_id: int) -> str:
    return TOKEN_NAMES[token_id]


def answer_token(color: int) -> int:
    return COLOR_BASE + color


def answer_color(token_id: int) -> int:
    color = token_id - COLOR_BASE
    if not 0 <= color < N_COLORS:
        raise ValueError(f"token {token_id} is not an answer token")
    return color


def _allowed_block_starts(grid_side: int, patch_counts=(2, 3, 4)) -> list[int]:
    """Token rows/cols where a 2x2-token block stays inside one patch for every p."""
    starts = []
    for r in range(grid_side - BLOCK_TOKENS + 1):
        ok = True
        for p in patch_counts:
            if grid_side % p != 0:
                continue
            cell = grid_side // p
            if r // cell != (r + BLOCK_TOKENS - 1) // cell:
                ok = False
                break
        if ok:
            starts.append(r)
    return starts


@dataclass
class SceneSample:
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    query_ids: np.ndarray
    answer_id: int
    target_color: int
    target_cell: tuple[int, int]  # top-left token (row, col) of the 2x2 block
    distractors: list[tuple[int, int, int]] = field(default_factory=list)  # (row, col, color)
    seed: int = 0
    difficulty: str = "medium"
    grid_side: int = 12

    def gt_patch(self, p: int = 2) -> int:
        """Ground-truth patch index of the target under a p x p grid, row-major."""
        if self.grid_side % p != 0:
            raise ValueError(f"grid side {self.grid_side} not divisible by p={p}")
        cell = self.grid_side // p
        r, c = self.target_cell
        return (r // cell) * p + (c // cell)


def generate_scene(
    seed: int,
    difficulty: str = "medium",
    image_size: int = 48,
    patch_pixels: int = 4,
) -> SceneSample:
    if difficulty not in DIFFICULTY_PRESETS:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    preset = DIFFICULTY_PRESETS[difficulty]
    grid = image_size // patch_pixels
    rng = np.random.default_rng(seed)

    img = np.full((image_size, image_size, 3), 0.5, dtype=np.float32)
    img += rng.uniform(-1, 1, size=img.shape).astype(np.float32) * preset["noise"]

    starts = _allowed_block_starts(grid)
    lo, hi = preset["distractors"]
    n_distract = int(rng.integers(lo, hi + 1))
    cells: list[tuple[int, int]] = []
    while len(cells) < 1 + n_distract:
        cand = (int(rng.choice(starts)), int(rng.choice(starts)))
        if all(abs(cand[0] - r) >= BLOCK_TOKENS or abs(cand[1] - c) >= BLOCK_TOKENS for r, c in cells):
            cells.append(cand)

    def paint_block(row: int, col: int, color: int, marked: bool) -> None:
        y, x = row * patch_pixels, col * patch_pixels
        side = BLOCK_TOKENS * patch_pixels
        img[y : y + side, x : x + side] = PALETTE[color]
        if marked:
            mid = side // 2
            img[y + mid - 1 : y + mid + 1, x + mid - 1 : x + mid + 1] = preset["marker_gain"]

    target_color = int(rng.integers(N_COLORS))
    paint_block(*cells[0], target_color, marked=True)
    distractors = []
    for row, col in cells[1:]:
        color = int(rng.integers(N_COLORS))
        paint_block(row, col, color, marked=False)
        distractors.append((row, col, color))

    np.clip(img, 0.0, 1.0, out=img)
    return SceneSample(
        image=img,
        query_ids=QUERY_IDS.copy(),
        answer_id=answer_token(target_color),
        target_color=target_color,
        target_cell=cells[0],
        distractors=distractors,
        seed=seed,
        difficulty=difficulty,
        grid_side=grid,
    )


@dataclass
class CropSample:
    full_image: np.ndarray
    crop_image: np.ndarray  # quadrant upscaled back to model input size
    quadrant: str  # TL / TR / BL / BR
    token_rows: tuple[int, int]  # [start, stop) token rows in the full grid
    token_cols: tuple[int, int]

    def token_indices(self, grid_side: int) -> np.ndarray:
        rows = np.arange(*self.token_rows)
        cols = np.arange(*self.token_cols)
        return (rows[:, None] * grid_side + cols[None, :]).ravel()


def make_crops(image: np.ndarray, grid_side: int = 12) -> list[CropSample]:
    """Split into four equal quadrants, each re-encoded at full input resolution."""
    size = image.shape[0]
    if size % 2 != 0 or image.shape[1] != size:
        raise ValueError(f"make_crops: expected square even-sized image, got {image.shape}")
    half = size // 2
    half_tok = grid_side // 2
    out = []
    offsets = {"TL": (0, 0), "TR": (0, 1), "BL": (1, 0), "BR": (1, 1)}
    for name in QUADRANTS:
        qr, qc = offsets[name]
        quad = image[qr * half : (qr + 1) * half, qc * half : (qc + 1) * half]
        up = bilinear_resize(quad, (size, size)).astype(image.dtype)
        out.append(
            CropSample(
                full_image=image,
                crop_image=up,
                quadrant=name,
                token_rows=(qr * half_tok, (qr + 1) * half_tok),
                token_cols=(qc * half_tok, (qc + 1) * half_tok),
            )
        )
    return out


# -- dataset files ---------------------------------------------------------


def write_dataset(samples: list[SceneSample], out_dir: str | Path) -> None:
    """JSON-lines index plus a flat little-endian float32 blob of images."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.jsonl"
    blob_path = out_dir / "images.blob"
    with open(blob_path, "wb") as blob, open(index_path, "w") as index:
        blob.write(DATA_MAGIC)
        offset = len(DATA_MAGIC)
        for i, s in enumerate(samples):
            raw = np.ascontiguousarray(s.image, dtype="<f4").tobytes()
            rec = {
                "id": i,
                "seed": s.seed,
                "answer": s.answer_id,
                "gt_patch": s.gt_patch(2),
                "blob_offset": offset,
                "difficulty": s.difficulty,
                "target_cell": list(s.target_cell),
                "image_size": s.image.shape[0],
            }
            index.write(json.dumps(rec) + "\n")
            blob.write(raw)
            offset += len(raw)


def read_dataset(in_dir: str | Path) -> Iterator[SceneSample]:
    """Stream samples back; memory use is one image regardless of dataset size."""
    in_dir = Path(in_dir)
    index_path = in_dir / "index.jsonl"
    blob_path = in_dir / "images.blob"
    with open(blob_path, "rb") as blob:
        magic = blob.read(len(DATA_MAGIC))
        if magic != DATA_MAGIC:
            raise DataFormatError(
                f"{blob_path}: bad magic {magic!r} at byte 0, expected {DATA_MAGIC!r}"
            )
        blob.seek(0, 2)
        blob_size = blob.tell()
        with open(index_path) as index:
            for line_no, line in enumerate(index):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"{index_path}:{line_no + 1}: invalid JSON") from exc
                size = rec["image_size"]
                nbytes = size * size * 3 * 4
                start = rec["blob_offset"]
                if start + nbytes > blob_size:
                    raise DataFormatError(
                        f"{blob_path}: record {rec['id']} needs bytes "
                        f"[{start}, {start + nbytes}) but blob ends at {blob_size}"
                    )
                blob.seek(start)
                image = np.frombuffer(blob.read(nbytes), dtype="<f4").reshape(size, size, 3)
                target_cell = tuple(rec["target_cell"])
                yield SceneSample(
                    image=image.astype(np.float32),
                    query_ids=QUERY_IDS.copy(),
                    answer_id=rec["answer"],
                    target_color=answer_color(rec["answer"]),
                    target_cell=target_cell,  # type: ignore[arg-type]
                    seed=rec["seed"],
                    difficulty=rec.get("difficulty", "medium"),
                    grid_side=size // 4,
                )


def generate_dataset(
    count: int, seed: int, difficulty: str = "medium", image_size: int = 48
) -> list[SceneSample]:
    """Deterministic batch of scenes; sample i uses derived seed seed + i."""
    return [generate_scene(seed + i, difficulty, image_size) for i in range(count)]
