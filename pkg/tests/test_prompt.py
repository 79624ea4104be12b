from __future__ import annotations

import pytest

from llm4ts.errors import ConfigError, TemplateError
from llm4ts.prompt import (FINAL_QUESTION, PRESETS, SENTINELS, Decision, HistoryRecord,
                           PromptComponents, PromptContext, PromptTemplate, default_template,
                           display_round, format_history, parse_decision, parse_decision_detail,
                           render_prompt)

from conftest import GOLDEN

LOGGED_HISTORY_LINE = ("[{'C': 1, 'H': 0.381, 'D': 0.165, 'action': 2, 'reward': 0.1}, "
                     "{'C': 0, 'H': 0.431, 'D': 0.265, 'action': 2, 'reward': 103.9}, "
                     "{'C': 1, 'H': 0.481, 'D': 0.238, 'action': 2, 'reward': 0.1}, "
                     "{'C': 0, 'H': 0.531, 'D': 0.338}]")

QUOTED = [
    "If the user is sick, injured or cannot walk, then the mobile health app should not send a message.",
    "This morning, when we asked the user how they felt, the user reply was:",
    "Is there some long term consequence?",
    "Given these answers, provide the final answer to this question:",
    FINAL_QUESTION,
]


def logged_context(description="I twisted my ankle"):
    # D values carried at full precision from the replayed dynamics
    d2 = 0.265 * 0.9
    hist = (HistoryRecord(1, 0.381, 0.165, 2, 0.1), HistoryRecord(0, 0.431, 0.265, 2, 103.9),
            HistoryRecord(1, 0.481, d2, 2, 0.1), HistoryRecord(0, 0.531, d2 + 0.1))
    return PromptContext(description, hist)


@pytest.mark.parametrize("preset", PRESETS)
def test_golden_prompts(preset):
    text = render_prompt(PromptComponents.preset(preset), logged_context())
    assert text == (GOLDEN / f"prompt_{preset}.txt").read_text(encoding="utf-8")


@pytest.mark.parametrize("preset", PRESETS)
def test_sentinels_exactly_once(preset):
    comps = PromptComponents.preset(preset)
    text = render_prompt(comps, logged_context())
    for key, phrase in SENTINELS.items():
        assert text.count(phrase) == (1 if getattr(comps, key) else 0), (key, preset)
    assert text.count(FINAL_QUESTION) == 1


def test_bfqh_structure_and_order():
    text = render_prompt(PromptComponents.preset("BFQH"), logged_context())
    assert f"The latest and current user data in json format are: {LOGGED_HISTORY_LINE}." in text
    assert '"I twisted my ankle"' in text
    for sentence in QUOTED:
        assert sentence in text
    order = [text.index(SENTINELS[k]) for k in "bhfq"] + [text.index(FINAL_QUESTION)]
    assert order == sorted(order)


def test_bfq_has_no_history_block():
    text = render_prompt(PromptComponents.preset("BFQ"), logged_context())
    assert "user data in json format" not in text
    assert "'C':" not in text


def test_history_window():
    recs = [HistoryRecord(i % 2, i / 10, i / 20, 1, float(i)) for i in range(6)]
    rendered = format_history(recs, 4)
    assert rendered.count("'C'") == 4
    assert "'reward': 2.0" in rendered and "'reward': 1.0" not in rendered


def test_display_rounding_half_even():
    assert display_round(0.265 * 0.9) == 0.238
    assert display_round(0.265 * 0.9 + 0.1) == 0.338
    assert display_round(0.1 + (1 - 0.481) * 200) == 103.9
    assert display_round(0.2386) == 0.239


def test_candidate_toggle():
    comps = PromptComponents.preset("BF", include_candidate=True)
    ctx = PromptContext("fine", (), candidate_action=3)
    assert "considering action 3" in render_prompt(comps, ctx)
    assert "considering action" not in render_prompt(PromptComponents.preset("BF"), ctx)


def test_rendering_is_pure():
    comps = PromptComponents.preset("BFQH")
    assert render_prompt(comps, logged_context()) == render_prompt(comps, logged_context())


def test_unknown_preset():
    with pytest.raises(ConfigError):
        PromptComponents.preset("QQ")


def test_template_errors():
    with pytest.raises(TemplateError):
        PromptTemplate.parse("## F\n{user_reply} {mood}\n## FINAL\nx\n")
    with pytest.raises(TemplateError):
        PromptTemplate.parse("## B\nhello\n")
    with pytest.raises(TemplateError):
        PromptTemplate.parse("## F\n{user_reply}\n## FINAL\nx\n## EXTRA\ny\n")


def test_custom_template():
    tpl = PromptTemplate.parse("## B\nRules.\n## F\nReply: {user_reply}\n## FINAL\nSend?\n")
    out = render_prompt(PromptComponents.preset("BF"), PromptContext("ok"), tpl)
    assert out == "Rules.\nReply: ok\nSend?\n"
    with pytest.raises(TemplateError):
        render_prompt(PromptComponents.preset("BFQ"), PromptContext("ok"), tpl)
    assert default_template() is default_template()


@pytest.mark.parametrize("text, expected, how", [
    ("...long reasoning... FINAL ANSWER: NO", Decision.BLOCK, "marker"),
    ("Yes, the app should send the message.", Decision.ALLOW, "fallback"),
    ("", Decision.UNPARSEABLE, None),
    (None, Decision.UNPARSEABLE, None),
    ("final answer: yes", Decision.ALLOW, "marker"),
    ("FINAL ANSWER: YES\nwait, reconsidering.\nFINAL ANSWER: NO", Decision.BLOCK, "marker"),
    ("**FINAL ANSWER:** NO", Decision.BLOCK, "marker"),
    ("no idea" + " filler" * 60 + " maybe", Decision.UNPARSEABLE, None),
    ("Not sure. The answer is no.", Decision.BLOCK, "fallback"),
    ("The user is not a yesman.", Decision.UNPARSEABLE, None),
])
def test_parse_decision(text, expected, how):
    assert parse_decision_detail(text) == (expected, how)
    assert parse_decision(text) is expected
