"""
Corpus files: CSV and JSONL readers/writers plus the minimum-count filter

CSV: one check-in per line, ``user_id,poi_id,timestamp,app_cats,poi_cats``
with ``|`` between category ids. Optional leading comment lines declare
cardinalities and vocabularies::

    # num_pois=10 num_app_categories=5 num_poi_categories=5
    # app_names=social|games|...
    # poi_names=mall|office|...

JSONL: an optional ``{"meta": {...}}`` first line carrying the same keys,
then one object per check-in with the CSV field names.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Any, Iterable

import orjson
import structlog
from pydantic import ValidationError

from models.models import CheckIn, Corpus, default_names
from utils.errors import CorpusFormatError, UsageError

logger = structlog.get_logger(__name__)

FORMATS = ("csv", "jsonl")
_META_KEYS = ("num_pois", "num_app_categories", "num_poi_categories")


def detect_format(path: str | Path) -> str:
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("jsonl", "json", "ndjson"):
        return "jsonl"
    return "csv"


def _parse_ids(text: str, line: int, what: str) -> frozenset[int]:
    try:
        ids = frozenset(int(part) for part in text.split("|") if part.strip() != "")
    except ValueError:
        raise CorpusFormatError(f"{what} must be '|' separated integers, got {text!r}", line) from None
    return ids


def _make_checkin(line: int, **fields: Any) -> CheckIn:
    try:
        return CheckIn(**fields)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise CorpusFormatError(problems, line) from None


def _parse_header(text: str, meta: dict[str, Any], line: int) -> None:
    text = text.strip()
    for key in ("app_names", "poi_names"):
        # names may contain spaces, so the whole remainder is the value
        if text.startswith(f"{key}="):
            value = text[len(key) + 1:]
            meta[key] = value.split("|") if value else []
            return
    for token in text.split():
        if "=" not in token:
            continue
        key, value = token.split("=", 1)
        if key in _META_KEYS:
            try:
                meta[key] = int(value)
            except ValueError:
                raise CorpusFormatError(f"{key} must be an integer, got {value!r}", line) from None


def _read_csv(lines: Iterable[str]) -> tuple[dict[str, Any], list[tuple[int, int, CheckIn]]]:
    meta: dict[str, Any] = {}
    rows: list[tuple[int, int, CheckIn]] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            _parse_header(line[1:], meta, lineno)
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise CorpusFormatError(f"expected 5 comma-separated fields, got {len(parts)}", lineno)
        try:
            user_id, poi_id, timestamp = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError:
            raise CorpusFormatError(f"user_id, poi_id and timestamp must be integers: {line!r}", lineno) from None
        if user_id < 0:
            raise CorpusFormatError(f"user_id must be nonnegative, got {user_id}", lineno)
        checkin = _make_checkin(
            lineno,
            poi_id=poi_id,
            timestamp=timestamp,
            app_categories=_parse_ids(parts[3], lineno, "app categories"),
            poi_categories=_parse_ids(parts[4], lineno, "poi categories"),
        )
        rows.append((lineno, user_id, checkin))
    return meta, rows


def _read_jsonl(lines: Iterable[str]) -> tuple[dict[str, Any], list[tuple[int, int, CheckIn]]]:
    meta: dict[str, Any] = {}
    rows: list[tuple[int, int, CheckIn]] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = orjson.loads(line)
        except orjson.JSONDecodeError as e:
            raise CorpusFormatError(f"invalid JSON: {e}", lineno) from None
        if not isinstance(obj, dict):
            raise CorpusFormatError("each line must be a JSON object", lineno)
        if "meta" in obj:
            if rows:
                raise CorpusFormatError("meta line must come first", lineno)
            meta.update(obj["meta"] or {})
            continue
        try:
            user_id = int(obj["user_id"])
            fields = {
                "poi_id": obj["poi_id"],
                "timestamp": obj["timestamp"],
                "app_categories": frozenset(obj["app_categories"]),
                "poi_categories": frozenset(obj["poi_categories"]),
            }
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"missing or malformed field: {e}", lineno) from None
        if user_id < 0:
            raise CorpusFormatError(f"user_id must be nonnegative, got {user_id}", lineno)
        rows.append((lineno, user_id, _make_checkin(lineno, **fields)))
    return meta, rows


def _assemble(meta: dict[str, Any], rows: list[tuple[int, int, CheckIn]]) -> Corpus:
    inferred = {
        "num_pois": max((c.poi_id for _, _, c in rows), default=-1) + 1,
        "num_app_categories": max((max(c.app_categories) for _, _, c in rows), default=-1) + 1,
        "num_poi_categories": max((max(c.poi_categories) for _, _, c in rows), default=-1) + 1,
    }
    sizes = {key: int(meta.get(key, inferred[key])) for key in _META_KEYS}
    for lineno, _, c in rows:
        if c.poi_id >= sizes["num_pois"]:
            raise CorpusFormatError(f"poi id {c.poi_id} outside declared range [0, {sizes['num_pois']})", lineno)
        if max(c.app_categories) >= sizes["num_app_categories"]:
            raise CorpusFormatError(
                f"app category outside declared range [0, {sizes['num_app_categories']})", lineno
            )
        if max(c.poi_categories) >= sizes["num_poi_categories"]:
            raise CorpusFormatError(
                f"poi category outside declared range [0, {sizes['num_poi_categories']})", lineno
            )

    sequences: dict[int, list[CheckIn]] = {}
    for lineno, user_id, c in rows:
        seq = sequences.setdefault(user_id, [])
        if seq and c.timestamp < seq[-1].timestamp:
            raise CorpusFormatError(f"user {user_id}: timestamp {c.timestamp} goes back in time", lineno)
        seq.append(c)

    app_names = list(meta.get("app_names") or default_names("app", sizes["num_app_categories"]))
    poi_names = list(meta.get("poi_names") or default_names("poi", sizes["num_poi_categories"]))
    if len(app_names) != sizes["num_app_categories"] or len(poi_names) != sizes["num_poi_categories"]:
        raise CorpusFormatError("category name lists do not match the declared cardinalities")
    return Corpus(
        user_ids=list(sequences),
        users=list(sequences.values()),
        app_names=app_names,
        poi_names=poi_names,
        **sizes,
    )


def filter_corpus(corpus: Corpus, min_checkins: int = 5) -> Corpus:
    """Drop POIs seen fewer than ``min_checkins`` times overall and users left
    with fewer than ``min_checkins`` check-ins, repeating until nothing changes.
    Ids are not re-indexed."""
    user_ids = list(corpus.user_ids)
    users = [list(seq) for seq in corpus.users]
    rounds = 0
    while True:
        rounds += 1
        counts = Counter(c.poi_id for seq in users for c in seq)
        kept_ids, kept_users = [], []
        for uid, seq in zip(user_ids, users):
            seq = [c for c in seq if counts[c.poi_id] >= min_checkins]
            if len(seq) >= min_checkins:
                kept_ids.append(uid)
                kept_users.append(seq)
        # filtering only removes, so equal totals mean a fixpoint
        changed = sum(map(len, kept_users)) != sum(map(len, users))
        user_ids, users = kept_ids, kept_users
        if not changed:
            break
    logger.debug("corpus_filtered", rounds=rounds, users_before=corpus.num_users, users_after=len(users))
    return corpus.with_users(user_ids, users)


def parse_corpus(text: str, fmt: str = "csv", min_checkins: int = 5) -> Corpus:
    if fmt not in FORMATS:
        raise UsageError(f"corpus format must be one of {FORMATS}, got {fmt!r}")
    reader = _read_jsonl if fmt == "jsonl" else _read_csv
    meta, rows = reader(text.splitlines())
    return filter_corpus(_assemble(meta, rows), min_checkins)


def load_corpus(path: str | Path, fmt: str | None = None, min_checkins: int = 5) -> Corpus:
    """Read a CSV or JSONL corpus and apply the minimum-count filter"""
    path = Path(path)
    fmt = fmt or detect_format(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusFormatError(f"cannot read {path}: {e}") from e
    corpus = parse_corpus(text, fmt, min_checkins)
    logger.info(
        "corpus_loaded",
        path=str(path),
        format=fmt,
        users=corpus.num_users,
        checkins=corpus.num_checkins,
        pois=corpus.num_pois,
    )
    return corpus


def _meta(corpus: Corpus) -> dict[str, Any]:
    meta: dict[str, Any] = {key: getattr(corpus, key) for key in _META_KEYS}
    if corpus.app_names != default_names("app", corpus.num_app_categories):
        meta["app_names"] = corpus.app_names
    if corpus.poi_names != default_names("poi", corpus.num_poi_categories):
        meta["poi_names"] = corpus.poi_names
    return meta


def serialize_corpus(corpus: Corpus, fmt: str = "csv") -> bytes:
    """Render a corpus; parsing the result gives the same corpus back"""
    meta = _meta(corpus)
    out: list[bytes] = []
    if fmt == "jsonl":
        out.append(orjson.dumps({"meta": meta}, option=orjson.OPT_SORT_KEYS))
        for uid, seq in zip(corpus.user_ids, corpus.users):
            for c in seq:
                out.append(orjson.dumps({
                    "user_id": uid,
                    "poi_id": c.poi_id,
                    "timestamp": c.timestamp,
                    "app_categories": sorted(c.app_categories),
                    "poi_categories": sorted(c.poi_categories),
                }, option=orjson.OPT_SORT_KEYS))
    elif fmt == "csv":
        out.append(("# " + " ".join(f"{k}={meta[k]}" for k in _META_KEYS)).encode())
        for key in ("app_names", "poi_names"):
            if key in meta:
                out.append(f"# {key}={'|'.join(meta[key])}".encode())
        for uid, seq in zip(corpus.user_ids, corpus.users):
            for c in seq:
                apps = "|".join(str(a) for a in sorted(c.app_categories))
                pois = "|".join(str(s) for s in sorted(c.poi_categories))
                out.append(f"{uid},{c.poi_id},{c.timestamp},{apps},{pois}".encode())
    else:
        raise UsageError(f"corpus format must be one of {FORMATS}, got {fmt!r}")
    return b"\n".join(out) + b"\n"


def save_corpus(corpus: Corpus, path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or detect_format(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_corpus(corpus, fmt))
    return path
