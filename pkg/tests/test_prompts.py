"""Template catalog: asset integrity and rendering."""

import pytest

from kbloop.prompts import RenderError, TEMPLATE_NAMES, get_template, load_catalog, render


def test_catalog_has_all_templates():
    catalog = load_catalog()
    assert set(catalog) == set(TEMPLATE_NAMES)
    for template in catalog.values():
        assert template.instruction
        assert template.body


def test_relation_select_contains_instruction_and_slots():
    template = get_template("relation_select")
    assert "Please select 3 relations" in template.instruction
    prompt = render(
        template,
        {
            "thought": "find where Woodrow Wilson studied",
            "entity_name": "Woodrow Wilson",
            "relations": "educated at, employer",
        },
    )
    assert "Please select 3 relations" in prompt
    assert "Entity Name: Woodrow Wilson" in prompt
    assert prompt.rstrip().endswith("Answers:")


def test_triple_generate_training_hint():
    template = get_template("triple_generate")
    prompt = render(
        template,
        {
            "question": "what are the types of government in the United States?",
            "hint": "Hint: federal republic | constitutional republic\n",
            "known_triples": "United States of America, instance of, country",
        },
    )
    assert "Hint: federal republic | constitutional republic" in prompt
    # the shipped exemplar also carries its own hint line
    assert prompt.count("Hint:") == 2


def test_triple_generate_inference_has_no_task_hint():
    template = get_template("triple_generate")
    prompt = render(
        template,
        {"question": "q", "hint": "", "known_triples": "a, b, c"},
    )
    assert prompt.count("Hint:") == 1  # exemplar only


def test_unbound_slot_raises_with_name():
    template = get_template("entity_select")
    with pytest.raises(RenderError, match="candidates"):
        render(template, {"thought": "t", "entity_name": "e"})


def test_exemplars_shipped_verbatim():
    assert any(
        "Q30: country primarily located in North America" in ex
        for ex in get_template("entity_select").exemplars
    )
    assert any("Observation 4: Davidson College | Princeton University | Johns Hopkins University" in ex
               for ex in get_template("agent_train").exemplars)
    assert any("Action 6: Finish[John Shakespeare]" in ex
               for ex in get_template("agent_infer").exemplars)
    assert any("North Korea, head of government, Pak Pong-ju" in ex
               for ex in get_template("triple_modify").exemplars)
    assert any("John Shakespeare, occupation, merchant" in ex
               for ex in get_template("path_select").exemplars)


def test_rendering_is_deterministic():
    template = get_template("cot")
    assert render(template, {"question": "q?"}) == render(template, {"question": "q?"})
