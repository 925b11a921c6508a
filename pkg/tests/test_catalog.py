import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dxconsensus.catalog import (
    CODE_PATTERN,
    Catalog,
    DsmCode,
    MalformedCode,
    UnknownCode,
    default_catalog,
    extract_codes,
    lookup_label,
    validate_code,
)
from helpers import SEEDED_CODES, brute_force_codes


def test_default_catalog_has_the_six_cases():
    assert sorted(default_catalog()) == SEEDED_CODES


@pytest.mark.parametrize(
    "code,label",
    [
        ("296.21", "Major Depressive Disorder"),
        ("296.41", "Bipolar I Disorder, Current Episode Manic"),
        ("300.01", "Panic Disorder"),
        ("309.81", "Post-Traumatic Stress Disorder"),
        ("295.90", "Schizophrenia"),
        ("300.02", "Generalized Anxiety Disorder"),
    ],
)
def test_labels(code, label):
    assert validate_code(code).label == label
    assert lookup_label(code) == label


def test_validate_trims_whitespace():
    entry = validate_code("  296.21\n")
    assert entry == DsmCode("296.21", "Major Depressive Disorder")
    assert entry.code == "296.21"


@pytest.mark.parametrize("text", ["29621", "296.211", "2962.1", "296.", "a296.21", "296,21", ""])
def test_malformed(text):
    with pytest.raises(MalformedCode):
        validate_code(text)


@pytest.mark.parametrize("text", ["300.99", "111.11", "296.2"])
def test_well_formed_but_unknown(text):
    assert CODE_PATTERN.fullmatch(text)
    with pytest.raises(UnknownCode):
        validate_code(text)


def test_lookup_unknown():
    with pytest.raises(UnknownCode):
        lookup_label("111.11")


def test_ordering_is_by_code():
    a = DsmCode("300.01", "Panic Disorder", "anxiety")
    b = DsmCode("296.21", "Major Depressive Disorder", "mood")
    assert sorted([a, b]) == [b, a]
    assert DsmCode("296.21", "anything") == b


def test_duplicate_codes_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        Catalog([DsmCode("296.21", "x"), DsmCode("296.21", "y")])


def test_catalog_file_format(tmp_path):
    path = tmp_path / "codes.tsv"
    path.write_text("# comment\n\n300.23\tSocial Anxiety Disorder\tanxiety\n", encoding="utf-8")
    cat = Catalog.from_file(path)
    assert cat.validate_code("300.23").category == "anxiety"
    path.write_text("300.23 Social Anxiety Disorder\n", encoding="utf-8")
    with pytest.raises(ValueError):
        Catalog.from_file(path)


@pytest.mark.parametrize(
    "text,expected",
    [
        ("diagnosis is DSM-5 300.01 (Panic Disorder)", ["300.01"]),
        ("", []),
        ("codes 296.21 and 309.81 and again 296.21", ["296.21", "309.81"]),
        ("Diagnosis: 296.21.", ["296.21"]),
        ("version 1.296.21 and 1296.21 and 296.215", []),
        ("300.99 then 296.41", ["300.99", "296.41"]),
    ],
)
def test_extract_examples(text, expected):
    found = extract_codes(text)
    assert [c.code for c in found] == expected
    assert [c.code for c in found] == brute_force_codes(text)


def test_extract_tags_uncatalogued():
    found = extract_codes("300.99 then 296.41")
    assert [c.catalogued for c in found] == [False, True]
    assert found[1].entry.label.startswith("Bipolar I")


_alphabet = st.sampled_from(list("0123456789.  aZ:-(\n") + ["296.21", "300.0", "309.81"])
_text = st.lists(_alphabet, max_size=40).map("".join)


@settings(max_examples=400, deadline=None)
@given(_text)
def test_extract_matches_brute_force(text):
    assert [c.code for c in extract_codes(text)] == brute_force_codes(text)


@settings(max_examples=300, deadline=None)
@given(_text)
def test_extracted_codes_revalidate_and_keep_order(text):
    found = extract_codes(text)
    positions = []
    for c in found:
        assert CODE_PATTERN.fullmatch(c.code)
        positions.append(text.index(c.code))
    assert positions == sorted(positions)
    assert len(set(positions)) == len(positions)


_pad = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)


@settings(max_examples=300, deadline=None)
@given(_pad, st.sampled_from(SEEDED_CODES + ["123.4", "999.99"]), _pad)
def test_boundary_padding(a, code, b):
    if (a and (a[-1].isdigit() or a[-1] == ".")) or (b and (b[0].isdigit() or b[0] == ".")):
        return
    assert code in [c.code for c in extract_codes(a + code + b)]
