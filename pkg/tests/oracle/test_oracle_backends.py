"""Tests for the scene-graph backends."""

import numpy as np
import pytest
from reorm.errors import MalformedResponse, PromptInputError, SceneError
from reorm.oracle.backends import ORACLE_SCORE, REFUSAL, oracle_backends
from reorm.oracle.scene import footprint_mask, render
from reorm.parsing import (
    parse_analyzer_response,
    parse_consolidated_list,
    parse_examiner_response,
    parse_labeled_list,
    parse_target_line,
)
from reorm.prompts import (
    consistency_context,
    consolidate_context,
    render_analyzer,
    render_chain_step,
    render_examiner,
    render_simulator,
)
from reorm.raster import Mask, mask_union
from reorm.schemas import ChainStep, RemovalPlan


class TestOracleReasoner:
    def test_analyzer_lists_target_then_dependents(self, person_scene, person_backends):
        text = person_backends.vision_reasoner.vision_reason(
            render_analyzer("Remove the person."), render(person_scene)
        )
        plan = parse_analyzer_response(text, strict=True)
        assert plan.labels == ["person", "the person's shadow", "the watering can"]
        assert "lighting dependent" in plan.reasoning

    def test_analyzer_without_dependents(self, person_scene, person_backends):
        text = person_backends.vision_reasoner.vision_reason(render_analyzer("Remove the lamp."), render(person_scene))
        plan = parse_analyzer_response(text)
        assert plan.labels == ["lamp"]
        assert "No other element" in plan.reasoning

    def test_analyzer_refuses_unknown_target(self, person_scene, person_backends):
        text = person_backends.vision_reasoner.vision_reason(
            render_analyzer("Remove the unicorn."), render(person_scene)
        )
        assert text == REFUSAL
        with pytest.raises(MalformedResponse):
            parse_analyzer_response(text)

    def test_analyzer_skips_already_removed_dependents(self, person_scene, person_backends):
        image = render(person_scene, {"o1"})
        text = person_backends.vision_reasoner.vision_reason(render_analyzer("Remove the person."), image)
        assert parse_analyzer_response(text).labels == ["person", "the watering can"]

    def test_simulator_and_examiner_agree_on_clean_edit(self, person_scene, person_backends):
        reasoner = person_backends.vision_reasoner
        original = render(person_scene)
        plan = RemovalPlan(labels=["person", "the person's shadow", "the watering can"])
        description = reasoner.vision_reason(render_simulator(plan), original)
        assert '"lamp"' in description
        assert '"person"' not in description

        edited = render(person_scene, {"o0", "o1", "o2"})
        correction = parse_examiner_response(reasoner.vision_reason(render_examiner(description), edited))
        assert correction.labels == []

    def test_examiner_flags_leftovers(self, person_scene, person_backends):
        reasoner = person_backends.vision_reasoner
        plan = RemovalPlan(labels=["person", "the person's shadow", "the watering can"])
        description = reasoner.vision_reason(render_simulator(plan), render(person_scene))
        residue = render(person_scene, {"o0", "o2"})
        correction = parse_examiner_response(reasoner.vision_reason(render_examiner(description), residue))
        assert correction.labels == ["the person's shadow"]

    def test_simulator_omission_is_flagged(self, person_scene):
        backends = oracle_backends(person_scene, simulator_omits=["lamp"])
        reasoner = backends.vision_reasoner
        description = reasoner.vision_reason(render_simulator(RemovalPlan(labels=["person"])), render(person_scene))
        assert '"lamp"' not in description
        correction = parse_examiner_response(
            reasoner.vision_reason(render_examiner(description), render(person_scene, {"o0"}))
        )
        assert correction.labels == ["the lamp"]

    def test_visual_stage_needs_image(self, person_backends):
        with pytest.raises(PromptInputError):
            person_backends.vision_reasoner.answer(render_analyzer("Remove the lamp.").role, "Remove the lamp.", None)

    def test_unknown_omission_name(self, person_scene):
        with pytest.raises(SceneError):
            oracle_backends(person_scene, simulator_omits=["piano"])


class TestOracleChain:
    def test_chain_reaches_the_single_prompt_plan(self, person_scene, person_backends):
        text_reasoner = person_backends.text_reasoner
        vision_reasoner = person_backends.vision_reasoner
        image = render(person_scene)

        target_text = text_reasoner.text_reason(render_chain_step(ChainStep.IDENTIFY_TARGET, "Remove the person."))
        target = parse_target_line(target_text)
        assert target == "person"

        elements_text = vision_reasoner.vision_reason(render_chain_step(ChainStep.ENUMERATE_ELEMENTS, target), image)
        elements = parse_labeled_list(elements_text, "Elements:")
        assert elements == ["person's shadow", "watering can", "lamp"]

        consistency = text_reasoner.text_reason(
            render_chain_step(ChainStep.REASON_CONSISTENCY, consistency_context(target, elements))
        )
        inconsistent = parse_labeled_list(consistency, "Inconsistent:")
        assert inconsistent == ["person's shadow", "watering can"]

        consolidated = text_reasoner.text_reason(
            render_chain_step(ChainStep.CONSOLIDATE_LIST, consolidate_context([target], inconsistent))
        )
        assert parse_consolidated_list(consolidated).labels == ["person", "person's shadow", "watering can"]

    def test_identify_target_refusal(self, person_backends):
        text = person_backends.text_reasoner.text_reason(
            render_chain_step(ChainStep.IDENTIFY_TARGET, "Remove the unicorn.")
        )
        with pytest.raises(MalformedResponse):
            parse_target_line(text)


class TestOracleTools:
    def test_segmenter_returns_exact_footprints(self, person_scene, person_backends):
        image = render(person_scene)
        result = person_backends.segmenter.segment(image, ["the person's shadow", "unicorn", "Lamp"])
        [shadow] = result.for_label("the person's shadow")
        assert shadow.mask == footprint_mask(person_scene, "o1")
        assert shadow.score == ORACLE_SCORE
        assert result.for_label("unicorn") == []
        assert len(result.for_label("Lamp")) == 1

    def test_segmenter_ignores_removed_objects(self, person_scene, person_backends):
        result = person_backends.segmenter.segment(render(person_scene, {"o3"}), ["lamp"])
        assert result.for_label("lamp") == []

    def test_remover_needs_full_coverage(self, person_scene, person_backends):
        image = render(person_scene)
        partial = footprint_mask(person_scene, "o0").data.copy()
        partial[12, 12] = 0
        assert person_backends.remover.remove(image, Mask(partial)) == image

    def test_remover_restores_background(self, person_scene, person_backends):
        image = render(person_scene)
        mask = mask_union([footprint_mask(person_scene, "o0"), footprint_mask(person_scene, "o3")])
        edited = person_backends.remover.remove(image, mask)
        assert edited == render(person_scene, {"o0", "o3"})
        untouched = ~mask.data.astype(bool)
        assert np.array_equal(edited.pixels[untouched], image.pixels[untouched])

    def test_faulty_remover_and_honest_correction(self, person_scene):
        backends = oracle_backends(person_scene, faulty_object="person's shadow")
        image = render(person_scene)
        mask = mask_union([footprint_mask(person_scene, "o0"), footprint_mask(person_scene, "o1")])
        first = backends.remover.remove(image, mask)
        assert first == render(person_scene, {"o0"})
        assert backends.remover_for_correction().remove(first, footprint_mask(person_scene, "o1")) == render(
            person_scene, {"o0", "o1"}
        )

    def test_no_correction_remover_by_default(self, person_backends):
        assert person_backends.correction_remover is None
        assert person_backends.remover_for_correction() is person_backends.remover
