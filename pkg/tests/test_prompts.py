import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN
from dxconsensus.consensus import failed_prediction, parse_prediction
from dxconsensus.prompts import (
    EmptyTranscript,
    PromptOverflow,
    RenderedPrompt,
    TemplateError,
    TemplateLibrary,
    TooFewPredictions,
    UnknownTemplate,
    default_library,
    parse_template,
    rationale_excerpt,
    render_adjudication,
    render_diagnostic,
    render_instruction,
    sha256_hex,
)
from dxconsensus.transcript import ConversationTurn

GOLDEN_PREDICTIONS = [
    ("llama3", "Persistent low mood for over two weeks with anhedonia.\nDiagnosis: 296.21 Major Depressive Disorder"),
    ("mistral", "Depressed mood, withdrawal and insomnia.\nDiagnosis: 296.21 Major Depressive Disorder"),
    ("qwen2", "Sleep disturbance and worry suggest an anxiety picture.\nDiagnosis: 300.01 Panic Disorder"),
]


def golden_predictions():
    return [parse_prediction(name, text) for name, text in GOLDEN_PREDICTIONS]


def test_diagnostic_golden(two_turns):
    rendered = render_diagnostic(two_turns)
    assert rendered.text.encode("utf-8") == (GOLDEN / "diagnostic_two_turns.txt").read_bytes()
    assert rendered.template_id == "diagnostic-default"
    assert rendered.digest == sha256_hex(rendered.text)


def test_adjudication_golden():
    rendered = render_adjudication(golden_predictions())
    assert rendered.text.encode("utf-8") == (GOLDEN / "adjudication_split.txt").read_bytes()


def test_adjudication_is_order_independent():
    preds = golden_predictions()
    assert render_adjudication(preds).text == render_adjudication(preds[::-1]).text


def test_turns_rendered_verbatim_and_in_order():
    turns = [
        ConversationTurn("psychiatrist", "Any {{cues}} or *markdown*?"),
        ConversationTurn("patient", "  leading spaces kept\tand tabs"),
        ConversationTurn("psychiatrist", "Ünïcode ok"),
    ]
    text = render_diagnostic(turns).text
    lines = [t.render() for t in turns]
    assert "\n".join(lines) in text
    # substituted content is never rescanned for slots
    assert "Any {{cues}} or *markdown*?" in text


def test_empty_transcript():
    with pytest.raises(EmptyTranscript):
        render_diagnostic([])


def test_truncation_drops_oldest_turns():
    turns = [ConversationTurn("patient" if i % 2 else "psychiatrist", f"turn {i} " + "x" * 200) for i in range(40)]
    full = render_diagnostic(turns, max_chars=10**6).text
    limited = render_diagnostic(turns, max_chars=len(full) - 500)
    assert len(limited.text) <= len(full) - 500
    assert "[TRUNCATED 3 TURNS]" in limited.text
    assert "turn 2 " not in limited.text and "turn 3 " in limited.text and "turn 39 " in limited.text
    with pytest.raises(PromptOverflow):
        render_diagnostic(turns, max_chars=len(full) - 500, truncate=False)
    with pytest.raises(PromptOverflow):
        render_diagnostic(turns, max_chars=100)


def test_adjudication_needs_two():
    with pytest.raises(TooFewPredictions):
        render_adjudication(golden_predictions()[:1])


def test_model_block_for_abstentions_and_errors():
    preds = [
        parse_prediction("a", "the patient seems anxious"),
        failed_prediction("b", "timeout: no reply"),
        parse_prediction("c", "Diagnosis: 309.81"),
    ]
    text = render_adjudication(preds).text
    assert "### Model: a\nPredicted code: none\nPredicted label: no catalogued diagnosis\nParse status: no_code_found" in text
    assert "(backend error: timeout: no reply)" in text
    assert "Parse status: backend_error" in text
    assert "Post-Traumatic Stress Disorder" in text


def test_rationale_budget():
    assert rationale_excerpt("  short  ") == "short"
    long = "word " * 1000
    cut = rationale_excerpt(long, 50)
    assert cut.endswith(" [...]") and len(cut) <= 56
    preds = [parse_prediction("a", long + "Diagnosis: 296.21"), parse_prediction("b", "Diagnosis: 296.21")]
    text = render_adjudication(preds, rationale_budget=100).text
    assert "Diagnosis: 296.21" not in text.split("### Model: b")[0]


def test_prompt_digest_checked():
    with pytest.raises(ValueError):
        RenderedPrompt("x", "text", "0" * 64)
    assert RenderedPrompt("x", "text", sha256_hex("text")).digest == sha256_hex("text")


def test_instruction_has_no_transcript(two_turns):
    instr = render_instruction(default_library().diagnostic())
    assert "DSM-5" in instr and "Symptom duration" in instr
    assert two_turns[0].text not in instr


TEMPLATE = """# comment
@id custom
@kind diagnostic
@preamble
Pre.
@cues
Duration | how long
@output_contract
End with Diagnosis: <DSM-5 code>.
@body
{{preamble}}
{{transcript}}
{{cues}}
{{output_contract}}
"""


def test_custom_template_dir(tmp_path, two_turns):
    (tmp_path / "custom.tmpl").write_text(TEMPLATE, encoding="utf-8")
    lib = TemplateLibrary.load([tmp_path])
    assert {"custom", "diagnostic-default", "adjudication-default"} <= set(lib.ids())
    text = render_diagnostic(two_turns, lib.diagnostic("custom")).text
    assert text.startswith("Pre.\nPsychiatrist: How have")
    assert text.endswith("### Duration\nhow long\nEnd with Diagnosis: <DSM-5 code>.")


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda t: t.replace("{{cues}}", "{{nope}}"), "unknown placeholder"),
        (lambda t: t.replace("@kind diagnostic", "@kind other"), "unknown template kind"),
        (lambda t: t.replace("Duration | how long", ""), "cue section"),
        (lambda t: t.replace("DSM-5", "DSM"), "DSM-5"),
        (lambda t: t.replace("@preamble", "@preamble\n@preamble"), "repeated"),
        (lambda t: t.replace("# comment", "stray text"), "before first"),
        (lambda t: t.replace("@id custom\n", ""), "missing @id"),
        (lambda t: t.replace("@cues", "@extra\nx\n@cues"), "unknown section"),
    ],
)
def test_template_errors(mutate, match):
    with pytest.raises(TemplateError, match=match):
        parse_template(mutate(TEMPLATE))


def test_library_lookups():
    lib = default_library()
    with pytest.raises(UnknownTemplate):
        lib.get("missing")
    with pytest.raises(UnknownTemplate):
        lib.diagnostic("adjudication-default")
    with pytest.raises(UnknownTemplate):
        lib.adjudication("diagnostic-default")


_turn_text = st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=40).filter(str.strip)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["psychiatrist", "patient"]), _turn_text), min_size=1, max_size=8))
def test_render_is_deterministic_and_contains_every_turn(raw):
    turns = [ConversationTurn(s, t) for s, t in raw]
    a, b = render_diagnostic(turns), render_diagnostic(list(turns))
    assert a == b
    assert "\n".join(t.render() for t in turns) in a.text
