"""Phone error rates broken down by place of articulation.

Reference and hypothesis phone sequences are aligned by minimum edit distance;
substitutions and deletions are charged to the category of the reference
phone, and insertions are counted in a row of their own.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

CATEGORIES = (
    "Silence",
    "Vowels",
    "Labial",
    "Labio-dental",
    "Dental",
    "Alveolar",
    "Alveo-palatal",
    "Palatal",
    "Velar",
    "Glottal",
)

MATCH, SUBSTITUTE, DELETE, INSERT = "match", "substitute", "delete", "insert"

# ARPAbet (lower case) plus bare vowel letters
DEFAULT_CATEGORY_MAP = {
    **{p: "Silence" for p in ("sil", "sp", "spn")},
    **{p: "Vowels" for p in (
        "aa", "ae", "ah", "ao", "aw", "ay", "eh", "er", "ey", "ih", "iy", "ow", "oy", "uh", "uw",
        "a", "e", "i", "o", "u",
    )},
    **{p: "Labial" for p in ("p", "b", "m", "w")},
    **{p: "Labio-dental" for p in ("f", "v")},
    **{p: "Dental" for p in ("th", "dh")},
    **{p: "Alveolar" for p in ("t", "d", "s", "z", "n", "l", "r")},
    **{p: "Alveo-palatal" for p in ("sh", "zh", "ch", "jh")},
    **{p: "Palatal" for p in ("y",)},
    **{p: "Velar" for p in ("k", "g", "ng")},
    **{p: "Glottal" for p in ("hh",)},
}


@dataclass(frozen=True)
class PhoneSequence:
    utt_id: str
    phones: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "phones", tuple(self.phones))
        for p in self.phones:
            if not p or any(c.isspace() for c in p):
                raise ValueError(f"{self.utt_id}: invalid phone label {p!r}")


@dataclass(frozen=True)
class EditOp:
    op: str
    ref: str | None
    hyp: str | None


def edit_distance_table(ref: Sequence[str], hyp: Sequence[str]) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(diag, d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def align(ref, hyp) -> list[EditOp]:
    """Minimum-edit-distance alignment; backtrace prefers match, substitute, delete, insert."""
    ref = ref.phones if isinstance(ref, PhoneSequence) else tuple(ref)
    hyp = hyp.phones if isinstance(hyp, PhoneSequence) else tuple(hyp)
    d = edit_distance_table(ref, hyp)
    ops = []
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            ops.append(EditOp(MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + 1:
            ops.append(EditOp(SUBSTITUTE, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(EditOp(DELETE, ref[i - 1], None))
            i -= 1
        else:
            ops.append(EditOp(INSERT, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def alignment_cost(ops: Iterable[EditOp]) -> int:
    return sum(op.op != MATCH for op in ops)


@dataclass
class CategoryCount:
    ref_count: int = 0
    substitutions: int = 0
    deletions: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions

    @property
    def per(self) -> float | None:
        return 100.0 * self.errors / self.ref_count if self.ref_count else None


@dataclass
class PERTable:
    categories: dict[str, CategoryCount] = field(default_factory=dict)
    insertions: int = 0

    @property
    def ref_count(self) -> int:
        return sum(c.ref_count for c in self.categories.values())

    @property
    def errors(self) -> int:
        return sum(c.errors for c in self.categories.values()) + self.insertions

    @property
    def overall(self) -> float | None:
        n = self.ref_count
        return 100.0 * self.errors / n if n else None

    def per(self, category: str) -> float | None:
        return self.categories[category].per

    def order(self) -> list[str]:
        extra = sorted(c for c in self.categories if c not in CATEGORIES)
        return list(CATEGORIES) + extra

    def to_tsv(self) -> str:
        def fmt(value):
            return "-" if value is None else f"{value:.2f}"

        lines = ["category\terrors\tref_phones\tper_percent"]
        for name in self.order():
            c = self.categories.get(name, CategoryCount())
            lines.append(f"{name}\t{c.errors}\t{c.ref_count}\t{fmt(c.per)}")
        n = self.ref_count
        ins = 100.0 * self.insertions / n if n else None
        lines.append(f"insertions\t{self.insertions}\t{n}\t{fmt(ins)}")
        lines.append(f"overall\t{self.errors}\t{n}\t{fmt(self.overall)}")
        return "\n".join(lines) + "\n"


def _category(phone: str, category_map: dict[str, str]) -> str:
    try:
        return category_map[phone]
    except KeyError:
        raise ValueError(f"phone {phone!r} is not in the category map") from None


def per_by_category(alignments: Iterable[Sequence[EditOp]], category_map: dict[str, str] | None = None) -> PERTable:
    """Pool alignments into per-category counts."""
    category_map = DEFAULT_CATEGORY_MAP if category_map is None else category_map
    table = PERTable({name: CategoryCount() for name in CATEGORIES})
    for ops in alignments:
        for op in ops:
            if op.hyp is not None:
                _category(op.hyp, category_map)
            if op.op == INSERT:
                table.insertions += 1
                continue
            count = table.categories.setdefault(_category(op.ref, category_map), CategoryCount())
            count.ref_count += 1
            if op.op == SUBSTITUTE:
                count.substitutions += 1
            elif op.op == DELETE:
                count.deletions += 1
    return table


# ---------------------------------------------------------------------------
# file formats


def parse_phone_lines(lines: Iterable[str], source: str = "<input>") -> dict[str, PhoneSequence]:
    out: dict[str, PhoneSequence] = {}
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        utt_id, phones = parts[0], parts[1:]
        if utt_id in out:
            raise ValueError(f"{source}:{lineno}: duplicate utt_id {utt_id!r}")
        out[utt_id] = PhoneSequence(utt_id, tuple(phones))
    return out


def read_phone_file(path) -> dict[str, PhoneSequence]:
    path = Path(path)
    return parse_phone_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


def write_phone_file(path, sequences: Iterable[PhoneSequence]) -> None:
    text = "".join(" ".join((s.utt_id,) + s.phones) + "\n" for s in sequences)
    Path(path).write_text(text, encoding="utf-8")


def read_category_map(path) -> dict[str, str]:
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ValueError(f"{path}:{lineno}: expected 'phone<TAB>category'")
        phone, category = parts[0].strip(), parts[1].strip()
        if phone in mapping and mapping[phone] != category:
            raise ValueError(f"{path}:{lineno}: phone {phone!r} mapped twice")
        mapping[phone] = category
    return mapping


def pair_sequences(refs: dict[str, PhoneSequence], hyps: dict[str, PhoneSequence]):
    missing_hyp = sorted(set(refs) - set(hyps))
    missing_ref = sorted(set(hyps) - set(refs))
    if missing_hyp or missing_ref:
        raise ValueError(
            f"utt_ids without a counterpart: missing in hypothesis {missing_hyp}, missing in reference {missing_ref}"
        )
    return [(refs[k], hyps[k]) for k in sorted(refs)]


def per_table(refs: dict[str, PhoneSequence], hyps: dict[str, PhoneSequence],
              category_map: dict[str, str] | None = None) -> PERTable:
    return per_by_category((align(r, h) for r, h in pair_sequences(refs, hyps)), category_map)


def per_report(ref_file, hyp_file, map_file=None) -> str:
    """TSV table of pooled per-category PERs for two phone files."""
    category_map = read_category_map(map_file) if map_file is not None else None
    return per_table(read_phone_file(ref_file), read_phone_file(hyp_file), category_map).to_tsv()
