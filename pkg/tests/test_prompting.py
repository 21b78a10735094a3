import pytest

from conftest import make_post
from modules.errors import PromptError
from modules.prompting import (
    TRUNCATION_MARKER,
    ShotPolicy,
    canonical_line,
    load_template,
    render_prompt,
    render_prompts,
    select_exemplars,
)

POST = make_post("p1", "Got a tranq wound on my forearm, using silvadene.", title="Forearm wound")


@pytest.fixture(scope="module")
def v3():
    return load_template("v3-single-line")


def test_v3_zero_shot(codebook, v3):
    prompt = render_prompt(POST, codebook, v3, ShotPolicy(0))
    assert prompt.target == codebook.alphabet
    assert prompt.system is None
    assert "{{" not in prompt.text
    assert "Examples:" not in prompt.text
    assert prompt.text.count(POST.body) == 1
    assert "Forearm wound" not in prompt.text
    assert "A=_, B=_, C=_, D=_, E=_, F=_, G=_, H=_, I=_, J=_, K=_, L=_, X=_" in prompt.text
    assert "relevance of this post to 13 specific topics" in prompt.text
    assert "For each category (A through X)" in prompt.text
    assert "I. Posts about MOUDs\n" in prompt.text


def test_v3_two_shot_selection_order(codebook, v3):
    prompt = render_prompt(POST, codebook, v3, ShotPolicy(2, (2, 1)))
    g_text, c_text = codebook.exemplars[2].text, codebook.exemplars[1].text
    assert prompt.text.index(g_text) < prompt.text.index(c_text)
    assert "1. Post:" in prompt.text and "2. Post:" in prompt.text
    assert "Classification:\nA=0, B=1, C=0, D=0, E=0, F=0, G=1, H=1, I=0, J=1, K=0, L=0, X=0" in prompt.text


def test_post_text_is_not_expanded(codebook, v3):
    tricky = make_post("p2", "what does {{categories}} mean, tranq?")
    prompt = render_prompt(tricky, codebook, v3, ShotPolicy(0))
    assert "what does {{categories}} mean, tranq?" in prompt.text


def test_include_title(codebook, v3):
    prompt = render_prompt(POST, codebook, v3, ShotPolicy(0), include_title=True)
    assert prompt.payload == f"Forearm wound\n\n{POST.body}"


def test_system_user_roles(codebook, v3):
    prompt = render_prompt(POST, codebook, v3, ShotPolicy(0), roles="system-user")
    assert prompt.system.startswith("Task:")
    assert prompt.text.startswith("Reddit Post:")
    assert [m["role"] for m in prompt.messages()] == ["system", "user"]
    single = render_prompt(POST, codebook, v3, ShotPolicy(0))
    assert single.messages() == [{"role": "user", "content": single.text}]


def test_v1_one_prompt_per_theme(codebook):
    prompts = render_prompt(POST, codebook, load_template("v1-per-theme"), ShotPolicy(1, (2,)))
    assert len(prompts) == 13
    assert [p.target for p in prompts] == [(c,) for c in codebook.alphabet]
    first = prompts[0].text
    assert "'Xylazine Use Habits'" in first
    assert 'formatted as "A=[answer]"' in first
    assert "Answer:\nA=0" in first
    assert "Answer:\nJ=1" in prompts[codebook.alphabet.index("J")].text


def test_v2_lists_numbered_questions(codebook):
    prompt = render_prompt(POST, codebook, load_template("v2-multi-question"), ShotPolicy(0))
    assert '1. Xylazine Use Habits: ' in prompt.text
    assert 'Format: "X=[answer]".' in prompt.text
    assert prompt.target == codebook.alphabet


def test_render_prompts_always_a_list(codebook, v3):
    assert len(render_prompts(POST, codebook, v3, ShotPolicy(0))) == 1


def test_exemplar_budget_truncates(codebook, v3):
    prompt = render_prompt(POST, codebook, v3, ShotPolicy(1, (2,)), exemplar_char_budget=20)
    truncated = codebook.exemplars[2].text[:20].rstrip() + TRUNCATION_MARKER
    assert f'"{truncated}"' in prompt.text


def test_empty_body_is_prompt_error(codebook, v3):
    with pytest.raises(PromptError, match="empty body"):
        render_prompt(make_post("e", "  ", title="only a title"), codebook, v3, ShotPolicy(0))


def test_random_selection_is_seeded(codebook):
    policy = ShotPolicy(3)
    first = select_exemplars(codebook, policy, seed=7)
    assert first == select_exemplars(codebook, policy, seed=7)
    assert len({ex.text for ex in first}) == 3


def test_too_few_exemplars(codebook):
    with pytest.raises(PromptError, match="needs 7 exemplars"):
        select_exemplars(codebook, ShotPolicy(7), seed=0)


def test_selection_out_of_range(codebook):
    with pytest.raises(PromptError, match="out of range"):
        select_exemplars(codebook, ShotPolicy(1, (9,)), seed=0)


def test_selection_length_must_match_shots():
    with pytest.raises(PromptError):
        ShotPolicy(2, (1,))


def test_override_template_placeholders_checked(tmp_path):
    path = tmp_path / "custom.txt"
    path.write_text("Post: {{post}}\nTopics: {{topics}}\n")
    with pytest.raises(PromptError, match="topics"):
        load_template("v3-single-line", path)
    path.write_text("No post here: {{categories}}\n")
    with pytest.raises(PromptError, match="exactly once"):
        load_template("v3-single-line", path)


def test_template_hash_tracks_scaffold(v3, tmp_path):
    path = tmp_path / "v3.txt"
    path.write_text(v3.scaffold + "\n")
    assert load_template("v3-single-line", path).sha256 != v3.sha256


def test_canonical_line(codebook):
    v = codebook.vector({c: int(c in "AX") for c in codebook.alphabet})
    assert canonical_line(v, codebook) == "A=1, B=0, C=0, D=0, E=0, F=0, G=0, H=0, I=0, J=0, K=0, L=0, X=1"
