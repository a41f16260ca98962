"""Extract boxes, image selections and referring expressions from model text.

The grammar is tiered; tiers are tried in order and the first tier with at
least one match wins outright. Later tiers never contribute matches once an
earlier tier has fired, so a well-formed token answer is never polluted by
stray tuples elsewhere in the response.

  tier 1: <|box_start|>(x1,y1),(x2,y2)<|box_end|>
  tier 2: bare tuple pair  (a,b),(c,d)
  tier 3: bracketed quadruple  [a, b, c, d]

Parsing never raises on arbitrary input; an empty box list with flags is a
valid result that downstream scoring treats as a miss.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .geometry import BBox

# Flags recorded on a ParsedAnswer
FLAG_FALLBACK = "fallback_used"
FLAG_SWAPPED = "corners_swapped"
FLAG_CLAMPED = "clamped"
FLAG_NO_MATCH = "no_match"

_NUM = r"-?\d+(?:\.\d+)?"
_PAIR = rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)"

_TIER1 = re.compile(rf"<\|box_start\|>\s*{_PAIR}\s*,\s*{_PAIR}\s*<\|box_end\|>")
_TIER2 = re.compile(rf"{_PAIR}\s*,\s*{_PAIR}")
_TIER3 = re.compile(rf"\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]")

_IMAGE_LABEL = re.compile(r"[Ii]mage[-_ ]?(\d+)")

_ORDINALS = {
    "first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
    "sixth": 6, "seventh": 7, "eighth": 8, "ninth": 9, "tenth": 10,
}
_IMAGE_CHOICE = re.compile(
    r"[Ii]mage[-_ ]?(\d+)"
    r"|\b(\d+)\s*(?:st|nd|rd|th)\b"
    r"|\b(" + "|".join(_ORDINALS) + r")\b",
    re.IGNORECASE,
)

_REF_PREFIX = re.compile(r"^(?:answer|response|assistant|a)\s*[:：]\s*", re.IGNORECASE)
_REF_MARKUP = ("<|object_ref_start|>", "<|object_ref_end|>", "<ref>", "</ref>")
_QUOTE_PAIRS = [('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’"),
                ("`", "`"), ("**", "**"), ("*", "*")]


@dataclass(frozen=True)
class PredBox:
    """A parsed prediction: box in the parse space, optionally tied to an image."""

    box: BBox
    image_index: int | None = None


@dataclass
class ParsedAnswer:
    raw: str
    boxes: list[PredBox] = field(default_factory=list)
    referring_text: str | None = None
    flags: set[str] = field(default_factory=set)


def _nearest_image_label(text: str, pos: int) -> int | None:
    """0-based index of the last Image-K label before pos, if any."""
    last = None
    for m in _IMAGE_LABEL.finditer(text, 0, pos):
        last = m
    if last is None:
        return None
    k = int(last.group(1))
    return k - 1 if k >= 1 else None


def parse_boxes(text: str, clamp_range: tuple[float, float] | None = (0, 999)) -> ParsedAnswer:
    """Parse all boxes of the winning grammar tier, in textual order.

    Out-of-range coordinates are clamped (not rejected) so degenerate outputs
    stay scoreable; swapped corners are canonicalized. Both repairs are
    recorded as flags on the answer.
    """
    ans = ParsedAnswer(raw=text)
    if not isinstance(text, str) or not text:
        return ans

    matches: list[tuple[int, tuple[float, float, float, float]]] = []
    for tier, rx in ((1, _TIER1), (2, _TIER2), (3, _TIER3)):
        for m in rx.finditer(text):
            try:
                coords = tuple(float(g) for g in m.groups())
            except (TypeError, ValueError):
                continue
            matches.append((m.start(), coords))
        if matches:
            if tier > 1:
                ans.flags.add(FLAG_FALLBACK)
            break

    for pos, (x1, y1, x2, y2) in matches:
        try:
            box, swapped = BBox.from_corners(x1, y1, x2, y2, canonicalize=True)
        except Exception:
            continue  # non-finite garbage fails the match silently
        if swapped:
            ans.flags.add(FLAG_SWAPPED)
        if clamp_range is not None:
            lo, hi = clamp_range
            clamped = box.clamp(xmax=hi, ymax=hi, xmin=lo, ymin=lo)
            if clamped != box:
                ans.flags.add(FLAG_CLAMPED)
                box = clamped
        ans.boxes.append(PredBox(box=box, image_index=_nearest_image_label(text, pos)))

    if not ans.boxes:
        ans.flags.add(FLAG_NO_MATCH)
    return ans


def parse_image_choice(text: str, n_images: int) -> int | None:
    """0-based index of the first image reference resolving to [1, n_images]."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if not isinstance(text, str):
        return None
    for m in _IMAGE_CHOICE.finditer(text):
        if m.group(1) is not None:
            k = int(m.group(1))
        elif m.group(2) is not None:
            k = int(m.group(2))
        else:
            k = _ORDINALS[m.group(3).lower()]
        if 1 <= k <= n_images:
            return k - 1
    return None


def extract_referring(text: str) -> str:
    """Trimmed referring expression: markup, role prefixes and quotes stripped."""
    if not isinstance(text, str):
        return ""
    s = text
    for token in _REF_MARKUP:
        s = s.replace(token, "")
    s = s.strip()
    s = _REF_PREFIX.sub("", s).strip()
    changed = True
    while changed and s:
        changed = False
        for opened, closed in _QUOTE_PAIRS:
            if (
                len(s) > len(opened) + len(closed)
                and s.startswith(opened)
                and s.endswith(closed)
            ):
                s = s[len(opened):-len(closed)].strip()
                changed = True
    return s.rstrip(".").strip()


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


def render_box_token(box: BBox) -> str:
    """Canonical tier-1 rendering; parse_boxes round-trips it exactly."""
    return (
        f"<|box_start|>({_fmt(box.x1)},{_fmt(box.y1)}),"
        f"({_fmt(box.x2)},{_fmt(box.y2)})<|box_end|>"
    )
