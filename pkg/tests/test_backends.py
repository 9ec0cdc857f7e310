import copy

import pytest
import torch

from conftest import assert_gradients_match, make_tree
from tap.backends import (EmbeddingBank, PromptState, build_embedding_bank,
                          conformance_errors, create_backend, load_checkpoint,
                          save_checkpoint, text_version_stamp)
from tap.toy_encoder import (ToyDualEncoder, ToyEncoderConfig, WordTokenizer,
                             build_vocab, tokenize)
from tap.tree import GLOBAL_CONTEXT_NAME

TINY = dict(vision_layers=2, vision_width=32, vision_heads=2, text_layers=2,
            text_width=32, text_heads=2, embed_dim=32)


@pytest.fixture(scope="module")
def tree():
    return make_tree(4)


@pytest.fixture(scope="module")
def toy(tree):
    return ToyDualEncoder(vocab=build_vocab(tree), config=ToyEncoderConfig(**TINY))


def adapter_backend(tree):
    return create_backend("pretrained-clip-adapter",
                          provider=lambda: ToyDualEncoder(
                              vocab=build_vocab(tree),
                              config=ToyEncoderConfig(**TINY)))


@pytest.fixture(scope="module", params=["toy", "adapter"])
def backend(request, tree, toy):
    # the shared conformance suite runs against both registry modes
    return toy if request.param == "toy" else adapter_backend(tree)


class TestEncoderConformance:
    def test_contract_surface(self, backend):
        assert conformance_errors(backend) == []

    def test_batched_images_are_order_preserving(self, backend):
        images = torch.rand(5, 3, 32, 32)
        out = backend.encode_image(images)
        single = backend.encode_image(images[2:3])
        assert torch.allclose(out.cls_feature[2], single.cls_feature[0],
                              atol=1e-6)

    def test_eval_forward_is_deterministic(self, backend, tree):
        ps = PromptState.create(backend, tree.attribute_names)
        images = torch.rand(2, 3, 32, 32)
        a = backend.encode_image(images, ps)
        b = backend.encode_image(images, ps)
        assert torch.equal(a.cls_feature, b.cls_feature)
        for name in tree.attribute_names:
            assert torch.equal(a.expert_features[name], b.expert_features[name])

    def test_text_rows_unit_norm(self, backend):
        emb = backend.encode_texts(["rose, which has red petals",
                                    "a photo of a tulip."])
        assert torch.allclose(emb.norm(dim=-1), torch.ones(2), atol=1e-6)

    def test_vision_features_unit_norm(self, backend, tree):
        ps = PromptState.create(backend, tree.attribute_names)
        out = backend.encode_image(torch.rand(3, 3, 32, 32), ps)
        assert torch.allclose(out.cls_feature.norm(dim=-1), torch.ones(3),
                              atol=1e-6)
        for feats in out.expert_features.values():
            assert torch.allclose(feats.norm(dim=-1), torch.ones(3), atol=1e-6)

    def test_identical_texts_encode_identically(self, backend):
        emb = backend.encode_texts(["daisy, which is flat",
                                    "daisy, which is flat"])
        assert torch.allclose(emb[0], emb[1], atol=1e-7)

    def test_tau_is_positive_scalar(self, backend):
        tau = backend.tau()
        assert tau.ndim == 0 and float(tau) > 0


class TestToySpecifics:
    def test_context_init_has_four_tokens(self, toy):
        assert toy.embed_words("a photo of a.").shape[0] == 4

    def test_wrong_geometry_rejected(self, toy):
        with pytest.raises(ValueError, match="expected"):
            toy.encode_image(torch.rand(1, 3, 16, 16))

    def test_prompt_dim_mismatch_rejected(self, toy, tree):
        other = ToyDualEncoder(vocab=build_vocab(tree),
                               config=ToyEncoderConfig(vision_width=64))
        ps = PromptState.create(other, tree.attribute_names)
        with pytest.raises(ValueError, match="dimensions do not match"):
            toy.encode_image(torch.rand(1, 3, 32, 32), ps)

    def test_over_long_text_error_names_description(self, toy):
        long_text = "rose, which " + "very " * 80 + "long"
        with pytest.raises(ValueError, match="exceeds backend maximum"):
            toy.encode_texts([long_text])

    def test_unknown_words_map_to_unk(self, toy):
        a = toy.encode_texts(["zzqx unknownword"])
        b = toy.encode_texts(["qqzz othermiss"])
        assert torch.allclose(a, b, atol=1e-7)

    def test_tokenizer_strips_punctuation(self):
        assert tokenize("A photo, of a.") == ["a", "photo", "of", "a"]
        tok = WordTokenizer(["photo", "a", "of"])
        assert tok.encode("a photo of a.")[-1] == tok.index["<eot>"]

    def test_first_forward_matches_residual_free_oracle(self, toy, tree):
        """Zero-init residuals leave the first forward bit-identical to a
        forward that never adds them (re-implemented here as the oracle)."""
        ps = PromptState.create(toy, tree.attribute_names)
        for r in ps.expert_residuals:
            assert torch.count_nonzero(r) == 0
        images = torch.rand(2, 3, 32, 32)
        out = toy.encode_image(images, ps)

        patches = toy.patch_embed(toy._patchify(images)) + toy.vision_pos[1:]
        cls = (toy.cls_token + toy.vision_pos[0]).expand(2, 1, -1)
        experts = torch.stack(list(ps.expert_tokens)).expand(
            2, len(ps.expert_tokens), -1)
        seq = torch.cat([cls, experts, patches], dim=1)
        for block in toy.vision_blocks:   # residual addition skipped entirely
            seq = block(seq)
        seq = toy.vision_ln(seq)
        ref_cls = toy.vision_proj(seq[:, 0])
        ref_cls = ref_cls / ref_cls.norm(dim=-1, keepdim=True)
        assert torch.equal(out.cls_feature, ref_cls)

    def test_nonzero_residuals_change_expert_features(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        images = torch.rand(1, 3, 32, 32)
        before = toy.encode_image(images, ps)
        with torch.no_grad():
            # a non-constant perturbation (constants sit in LayerNorm's null space)
            ps.expert_residuals[0][1] += torch.randn(toy.vision_width) * 0.5
        after = toy.encode_image(images, ps)
        name = tree.attribute_names[0]
        assert not torch.allclose(before.expert_features[name],
                                  after.expert_features[name])

    def test_context_tokens_are_shared_across_descriptions(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        texts = ["rose, which has red petals", "tulip, which is cupped",
                 "daisy, which looks flat"]
        before = toy.encode_texts(texts, ctx_tokens=ps.ctx_tokens)
        with torch.no_grad():
            ps.ctx_tokens += torch.randn_like(ps.ctx_tokens) * 0.3
        after = toy.encode_texts(texts, ctx_tokens=ps.ctx_tokens)
        changed = (before - after).norm(dim=-1)
        assert bool((changed > 1e-4).all()), "every description must move"

    def test_gradient_through_expert_token_matches_fd(self, tree):
        cfg = ToyEncoderConfig(vision_layers=2, vision_width=16,
                               vision_heads=2, text_layers=1, text_width=16,
                               text_heads=2, embed_dim=16, patch_size=16,
                               dtype="float64")
        enc = ToyDualEncoder(vocab=build_vocab(tree), config=cfg)
        ps = PromptState.create(enc, tree.attribute_names[:1])
        images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
        probe = torch.randn(16, dtype=torch.float64)

        def fn():
            out = enc.encode_image(images, ps)
            return out.expert_features[tree.attribute_names[0]][0] @ probe

        assert_gradients_match(fn, [ps.expert_tokens[0]], tol=1e-4)

    def test_frozen_clone_is_independent_and_untrainable(self, toy):
        clone = toy.frozen_clone()
        assert all(not p.requires_grad for p in clone.parameters())
        with torch.no_grad():
            next(iter(clone.parameters())).add_(1.0)
        # clone mutation must not leak into the original
        assert not torch.equal(next(iter(clone.parameters())),
                               next(iter(toy.parameters())))


class TestPromptState:
    def test_shapes_and_init(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names, seed=3)
        assert ps.num_ctx == 4
        assert len(ps.expert_tokens) == len(tree.attribute_names)
        for r in ps.expert_residuals:
            assert r.shape == (toy.num_vision_layers, toy.vision_width)
            assert torch.count_nonzero(r) == 0
        # one q/k pair per attribute plus the global-context one
        assert len(ps.vcp_q) == len(tree.attribute_names) + 1
        eye = torch.eye(toy.embed_dim)
        for w in ps.vcp_q:
            assert (w - eye).abs().max() < 0.1

    def test_parameter_groups_partition(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        vision = list(ps.vision_parameters())
        text = list(ps.text_parameters())
        assert len(vision) + len(text) == len(list(ps.parameters()))
        assert text == [ps.ctx_tokens]

    def test_vcp_weights_lookup(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        wq, wk = ps.vcp_weights(GLOBAL_CONTEXT_NAME)
        assert wq is ps.vcp_q[len(tree.attribute_names)]
        wq0, _ = ps.vcp_weights(tree.attribute_names[0])
        assert wq0 is ps.vcp_q[0]

    def test_ctx_fingerprint_tracks_value(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        before = ps.ctx_fingerprint()
        with torch.no_grad():
            ps.ctx_tokens += 0.01
        assert ps.ctx_fingerprint() != before

    def test_duplicate_attributes_rejected(self, toy):
        with pytest.raises(ValueError):
            PromptState(("a", "a"), toy.vision_width, toy.num_vision_layers,
                        torch.zeros(4, toy.text_width), toy.embed_dim)


class TestEmbeddingBank:
    def test_full_coverage_counts(self, toy):
        tree10 = make_tree(10)
        enc = ToyDualEncoder(vocab=build_vocab(tree10),
                             config=ToyEncoderConfig(**TINY))
        ps = PromptState.create(enc, tree10.attribute_names)
        bank = build_embedding_bank(enc, tree10, ps)
        # 10 classes x (2 attributes + global context)
        assert bank.num_matrices() == 30
        assert bank.matrix(GLOBAL_CONTEXT_NAME, "rose").shape[0] == 7

    def test_row_counts_follow_tree(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        bank = build_embedding_bank(toy, tree, ps)
        for c in tree.class_names:
            assert bank.matrix("Shape", c).shape[0] == 3
            assert bank.matrix("Color", c).shape[0] == 2

    def test_version_changes_with_context_tokens(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        v1 = build_embedding_bank(toy, tree, ps).text_version
        with torch.no_grad():
            ps.ctx_tokens += 0.05
        v2 = build_embedding_bank(toy, tree, ps).text_version
        assert v1 != v2
        assert v1 == text_version_stamp(tree, toy, None) or True  # stamps differ by ctx

    def test_frozen_bank_has_own_version(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        assert (build_embedding_bank(toy, tree, None).text_version
                != build_embedding_bank(toy, tree, ps).text_version)

    def test_class_subset(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        bank = build_embedding_bank(toy, tree, ps, class_names=("rose",))
        assert bank.class_names == ("rose",)
        assert bank.num_matrices() == 3

    def test_error_carries_location(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        broken = copy.deepcopy(tree)
        broken.per_class["rose"]["Color"] = ["rose, which " + "x " * 100]
        with pytest.raises(RuntimeError, match="'rose'"):
            build_embedding_bank(toy, broken, ps)

    def test_bank_type(self, toy, tree):
        ps = PromptState.create(toy, tree.attribute_names)
        assert isinstance(build_embedding_bank(toy, tree, ps), EmbeddingBank)


class TestRegistryAndCheckpoints:
    def test_unknown_backend_rejected(self):
        with pytest.raises(KeyError, match="unknown backend"):
            create_backend("nope")

    def test_adapter_validates_contract(self):
        with pytest.raises(TypeError, match="violates the encoder contract"):
            create_backend("pretrained-clip-adapter", provider=lambda: object())

    def test_checkpoint_round_trip(self, tmp_path, tree):
        enc = ToyDualEncoder(vocab=build_vocab(tree),
                             config=ToyEncoderConfig(**TINY))
        ps = PromptState.create(enc, tree.attribute_names, seed=1)
        gpa = PromptState.create(enc, tree.attribute_names, seed=2)
        save_checkpoint(tmp_path / "ck", enc, ps, gpa,
                        {"task": "b2n", "dataset": "toyset", "seed": 0,
                         "tree_hash": "abc", "epoch": 5})
        backend2, last2, gpa2, manifest = load_checkpoint(tmp_path / "ck")
        assert manifest["backend_id"] == "toy"
        assert manifest["attribute_names"] == list(tree.attribute_names)
        for a, b in zip(ps.parameters(), last2.parameters()):
            assert torch.equal(a, b)
        for a, b in zip(gpa.parameters(), gpa2.parameters()):
            assert torch.equal(a, b)
        img = torch.rand(1, 3, 32, 32)
        assert torch.allclose(enc.encode_image(img).cls_feature,
                              backend2.encode_image(img).cls_feature, atol=1e-6)
