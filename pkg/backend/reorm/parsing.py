"""Extract removal plans and correction lists from free-form reasoner responses."""

import json
import re

from reorm.errors import MalformedResponse
from reorm.prompts import format_label_list
from reorm.schemas import CorrectionList, RemovalPlan

REASONING_MARKER = "Reasoning:"
ANALYZER_LIST_MARKER = "Target Objects:"
EXAMINER_LIST_MARKER = "Objects to be removed:"

# opening quote -> accepted closing quotes
_QUOTES: dict[str, str] = {
    '"': '"',
    "'": "'",
    "“": "”\"",
    "‘": "’'",
}
_WRAPPING_QUOTES = "\"'`“”‘’"
_ARTICLE = re.compile(r"^(?:the|a|an)\s+", re.IGNORECASE)


def _last_marker(text: str, marker: str) -> re.Match | None:
    pattern = re.escape(marker).replace(r"\ ", r"\s+")
    matches = list(re.finditer(pattern, text, re.IGNORECASE))
    return matches[-1] if matches else None


def _next_significant(text: str, pos: int) -> str:
    while pos < len(text) and text[pos].isspace():
        pos += 1
    return text[pos] if pos < len(text) else ""


def _scan_list(text: str, start: int, strict: bool) -> tuple[list[str], int]:
    """Read the first bracketed list at or after ``start``; return items and end offset."""
    open_at = text.find("[", start)
    if open_at < 0:
        raise MalformedResponse("no bracketed list after marker", text)

    items: list[str] = []
    i = open_at + 1
    while True:
        while i < len(text) and (text[i].isspace() or text[i] == ","):
            i += 1
        if i >= len(text):
            raise MalformedResponse("unterminated list", text)
        c = text[i]
        if c == "]":
            end = i + 1
            break
        if c in _QUOTES:
            closers = _QUOTES[c]
            k = i + 1
            while True:
                k = min((p for p in (text.find(q, k) for q in closers) if p >= 0), default=-1)
                if k < 0:
                    raise MalformedResponse("unterminated quoted item", text)
                # a closing quote is one followed by a separator; apostrophes inside names are not
                if _next_significant(text, k + 1) in (",", "]", ""):
                    break
                k += 1
            item = text[i + 1 : k]
            if c == '"' and "\\" in item:
                try:
                    item = json.loads(f'"{item}"')
                except json.JSONDecodeError:
                    pass
            items.append(item)
            i = k + 1
        else:
            if strict:
                raise MalformedResponse("unquoted list item in strict mode", text)
            k = i
            while k < len(text) and text[k] not in ",]":
                k += 1
            items.append(text[i:k].strip())
            i = k

    if strict:
        try:
            loaded = json.loads(text[open_at:end])
        except json.JSONDecodeError as e:
            raise MalformedResponse(f"list is not valid JSON: {e}", text) from e
        if not isinstance(loaded, list) or not all(isinstance(x, str) for x in loaded):
            raise MalformedResponse("list must contain strings only", text)
        items = loaded
    return items, end


def _strip_wrapping_quotes(s: str) -> str:
    s = s.strip()
    if s.startswith("``") and s.endswith("''"):
        return s[2:-2].strip()
    while len(s) >= 2 and s[0] in _WRAPPING_QUOTES and s[-1] in _WRAPPING_QUOTES:
        s = s[1:-1].strip()
    return s


def parse_labeled_list(text: str, marker: str, strict: bool = False) -> list[str]:
    """Return the bracketed list following the last ``marker`` in ``text``."""
    match = _last_marker(text, marker)
    if match is None:
        raise MalformedResponse(f"missing marker {marker!r}", text)
    items, _ = _scan_list(text, match.end(), strict)
    return items


def _reasoning_before(text: str, list_match: re.Match) -> str | None:
    head = text[: list_match.start()]
    match = _last_marker(head, REASONING_MARKER)
    if match is None:
        return None
    return _strip_wrapping_quotes(head[match.end() :])


def parse_analyzer_response(text: str, strict: bool = False) -> RemovalPlan:
    """Parse the Reasoning / Target Objects answer format into a normalized plan."""
    list_match = _last_marker(text, ANALYZER_LIST_MARKER)
    if list_match is None:
        raise MalformedResponse(f"missing marker {ANALYZER_LIST_MARKER!r}", text)
    reasoning = _reasoning_before(text, list_match)
    if reasoning is None:
        raise MalformedResponse(f"missing marker {REASONING_MARKER!r}", text)
    items, _ = _scan_list(text, list_match.end(), strict)
    labels = normalize_labels(items)
    if not labels:
        raise MalformedResponse("removal list is empty", text)
    return RemovalPlan(reasoning=reasoning, labels=labels)


def parse_examiner_response(text: str, strict: bool = False) -> CorrectionList:
    """Parse the Examiner answer; an empty list means nothing to correct."""
    list_match = _last_marker(text, EXAMINER_LIST_MARKER)
    if list_match is None:
        raise MalformedResponse(f"missing marker {EXAMINER_LIST_MARKER!r}", text)
    items, _ = _scan_list(text, list_match.end(), strict)
    return CorrectionList(reasoning=_reasoning_before(text, list_match) or "", labels=normalize_labels(items))


def parse_target_line(text: str) -> str:
    """Parse the ``Target: <name>`` answer of the IdentifyTarget chain step."""
    match = None
    for match in re.finditer(r"^\s*Target\s*:(.*)$", text, re.IGNORECASE | re.MULTILINE):
        pass
    if match is None:
        raise MalformedResponse("missing 'Target:' line", text)
    value = match.group(1).strip()
    if value.startswith("["):
        items, _ = _scan_list(value, 0, strict=False)
        value = items[0] if items else ""
    value = " ".join(_strip_wrapping_quotes(value.rstrip(".")).rstrip(".").split())
    if not value:
        raise MalformedResponse("empty target", text)
    return value


def parse_consolidated_list(text: str) -> RemovalPlan:
    """Parse the ConsolidateList answer (a ``Target Objects:`` line, reasoning optional)."""
    list_match = _last_marker(text, ANALYZER_LIST_MARKER)
    if list_match is None:
        raise MalformedResponse(f"missing marker {ANALYZER_LIST_MARKER!r}", text)
    items, _ = _scan_list(text, list_match.end(), strict=False)
    reasoning = _reasoning_before(text, list_match) or ""
    labels = normalize_labels(items)
    if not labels:
        raise MalformedResponse("consolidated list is empty", text)
    return RemovalPlan(reasoning=reasoning, labels=labels)


# ---------------------------------------------------
# Label hygiene
# ---------------------------------------------------
def label_key(label: str) -> str:
    """Comparison key: whitespace-collapsed, lower-cased, leading article dropped."""
    return _ARTICLE.sub("", " ".join(label.split()).lower())


def normalize_labels(labels: list[str]) -> list[str]:
    """Trim, collapse whitespace, drop empties and article-insensitive duplicates; keep order."""
    seen: set[str] = set()
    out: list[str] = []
    for label in labels:
        cleaned = " ".join(label.split())
        if not cleaned:
            continue
        key = label_key(cleaned)
        if not key or key in seen:
            continue
        seen.add(key)
        out.append(cleaned)
    return out


# ---------------------------------------------------
# Canonical serializers
# ---------------------------------------------------
def format_analyzer_response(plan: RemovalPlan) -> str:
    """Serialize a plan in the Analyzer answer format."""
    return f'{REASONING_MARKER} "{plan.reasoning}"\n{ANALYZER_LIST_MARKER} {format_label_list(plan.labels)}'


def format_examiner_response(correction: CorrectionList) -> str:
    """Serialize a correction list in the Examiner answer format."""
    return f'{REASONING_MARKER} "{correction.reasoning}"\n{EXAMINER_LIST_MARKER} {format_label_list(correction.labels)}'
