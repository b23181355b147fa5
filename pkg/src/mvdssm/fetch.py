"""Stage MovieLens-100K on disk in its published layout.

The official archive is tried first. When grouplens.org is unreachable the
``recbole`` wheel is pulled from the package index instead; it bundles the same
100K ratings as tab-separated "atomic" files, which are rewritten here into
``u.data`` / ``u.user`` / ``u.item`` / ``u.occupation`` / ``u.genre``.

Fields the atomic files do not carry (video release date, IMDb URL) are left
empty and the release date is set to 01-Jan of the release year. Nothing in the
loader reads those fields.
"""

from __future__ import annotations

import io
import logging
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

logger = logging.getLogger(__name__)

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE_SPEC = "recbole==1.2.1"
_ATOMIC_PREFIX = "recbole/dataset_example/ml-100k/ml-100k."

GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

OCCUPATIONS = (
    "administrator", "artist", "doctor", "educator", "engineer",
    "entertainment", "executive", "healthcare", "homemaker", "lawyer",
    "librarian", "marketing", "none", "other", "programmer", "retired",
    "salesman", "scientist", "student", "technician", "writer",
)

_MONTH = "Jan"
REQUIRED_FILES = ("u.data", "u.user", "u.item")


def _have_dataset(out: Path) -> bool:
    return all((out / name).is_file() for name in REQUIRED_FILES)


def _from_grouplens(out: Path, timeout: float) -> bool:
    try:
        with urllib.request.urlopen(GROUPLENS_URL, timeout=timeout) as resp:
            blob = resp.read()
    except OSError as exc:
        logger.info("grouplens download failed: %s", exc)
        return False
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        for info in zf.infolist():
            name = Path(info.filename).name
            if info.filename.startswith("ml-100k/") and name.startswith("u.") and "." in name:
                (out / name).write_bytes(zf.read(info))
    return _have_dataset(out)


def _read_atomic(zf: zipfile.ZipFile, suffix: str) -> list[list[str]]:
    text = zf.read(_ATOMIC_PREFIX + suffix).decode("latin-1")
    rows = [line.split("\t") for line in text.splitlines() if line]
    return rows[1:]  # header carries field:type names


def convert_recbole_wheel(wheel: Path, out: Path) -> None:
    """Rewrite the ml-100k atomic files inside a recbole wheel as u.* files."""
    with zipfile.ZipFile(wheel) as zf:
        inter = _read_atomic(zf, "inter")
        users = _read_atomic(zf, "user")
        items = _read_atomic(zf, "item")

    with open(out / "u.data", "w", encoding="latin-1", newline="\n") as fh:
        for user, item, rating, ts in inter:
            fh.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    with open(out / "u.user", "w", encoding="latin-1", newline="\n") as fh:
        for uid, age, gender, occ, zipcode in users:
            fh.write(f"{uid}|{age}|{gender}|{occ}|{zipcode}\n")

    genre_index = {g: i for i, g in enumerate(GENRES)}
    with open(out / "u.item", "w", encoding="latin-1", newline="\n") as fh:
        for row in items:
            iid, title, year, classes = (row + [""] * 4)[:4]
            bits = ["0"] * len(GENRES)
            for g in classes.split():
                bits[genre_index[g]] = "1"
            if year.isdigit():
                full_title = f"{title} ({year})"
                release = f"01-{_MONTH}-{year}"
            else:
                full_title, release = title, ""
            fh.write("|".join([iid, full_title, release, "", ""] + bits) + "\n")

    (out / "u.occupation").write_text("\n".join(OCCUPATIONS) + "\n", encoding="latin-1")
    (out / "u.genre").write_text(
        "".join(f"{g}|{i}\n" for i, g in enumerate(GENRES)), encoding="latin-1"
    )


def _from_recbole(out: Path) -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        cmd = [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, RECBOLE_SPEC]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            logger.warning("pip download of %s failed: %s", RECBOLE_SPEC, proc.stderr.strip())
            return False
        wheels = list(Path(tmp).glob("recbole-*.whl"))
        if not wheels:
            return False
        convert_recbole_wheel(wheels[0], out)
    return _have_dataset(out)


def fetch_movielens(out: str | Path, timeout: float = 20.0) -> Path:
    """Ensure ``out`` holds u.data, u.user and u.item; return the directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if _have_dataset(out):
        return out
    if _from_grouplens(out, timeout) or _from_recbole(out):
        return out
    raise RuntimeError(f"could not stage MovieLens-100K into {out}")
