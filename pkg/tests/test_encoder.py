import numpy as np
import pytest

from videoground import encoder as E
from videoground import tensor as T
from videoground.attention import HeadConfig
from videoground.encoder import (ActionSpatialLayer, ActionTemporalLayer,
                                 AttributeSpatialLayer, BoxHead, Decoder,
                                 DecoderLayer, EncoderConfig, FlatEncoder,
                                 HierarchicalEncoder, QuerySplit,
                                 VideoFeatures, predict_boxes)
from videoground.tensor import DimensionError, Parameter, Tensor, grad_check


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def make_video(frames=3, grid=(2, 2), dim=8, seed=0):
    j = grid[0] * grid[1]
    patches = [Tensor(rand((j, dim), seed + i)) for i in range(frames)]
    return VideoFeatures(grid, patches, Tensor(rand((frames, dim),
                                                    seed + 100)))


def make_query(n=4, dim=8, seed=50):
    return QuerySplit(Tensor(rand((n, dim), seed)),
                      attr_idx=list(range(n - 2)),
                      act_idx=[n - 2, n - 1])


class TestVideoFeatures:
    def test_properties(self):
        v = make_video(frames=3, grid=(2, 2), dim=8)
        assert v.num_frames == 3
        assert v.patches_per_frame == 4
        assert v.dim == 8

    def test_rejects_wrong_patch_shape(self):
        with pytest.raises(DimensionError):
            VideoFeatures((2, 2), [Tensor(rand((3, 8)))],
                          Tensor(rand((1, 8))))

    def test_rejects_frame_count_mismatch(self):
        with pytest.raises(DimensionError):
            VideoFeatures((2, 2), [Tensor(rand((4, 8)))],
                          Tensor(rand((2, 8))))


class TestQuerySplit:
    def test_partition_enforced(self):
        with pytest.raises(ValueError):
            QuerySplit(Tensor(rand((3, 4))), [0], [1])

    def test_both_parts_nonempty(self):
        with pytest.raises(ValueError):
            QuerySplit(Tensor(rand((2, 4))), [0, 1], [])
        with pytest.raises(ValueError):
            QuerySplit(Tensor(rand((2, 4))), [], [0, 1])

    def test_s_act_is_mean(self):
        q = make_query(n=4, dim=8)
        expected = q.tokens.data[[2, 3]].mean(axis=0)
        assert np.max(np.abs(q.s_act().data[0] - expected)) < 1e-12


class TestAttributeSpatial:
    def test_frame_locality(self):
        layer = AttributeSpatialLayer(HeadConfig(2, 8), (2, 2), "ats",
                                      np.random.default_rng(0))
        s_attr = Tensor(rand((2, 8), 1))
        frames = [Tensor(rand((4, 8), i + 10)) for i in range(3)]
        out1, _ = layer.forward(frames, s_attr)
        bumped = [frames[0], Tensor(frames[1].data + 5.0), frames[2]]
        out2, _ = layer.forward(bumped, s_attr)
        assert np.array_equal(out1[0].data, out2[0].data)
        assert np.array_equal(out1[2].data, out2[2].data)
        assert not np.array_equal(out1[1].data, out2[1].data)

    def test_constant_frame_reduces_to_doubled_scores(self):
        # with every patch identical the pooled term equals the patches,
        # so the pyramid branch must agree with standard attention fed the
        # doubled effective query
        cfg = HeadConfig(2, 8)
        rng = np.random.default_rng(3)
        layer = AttributeSpatialLayer(cfg, (2, 2), "ats", rng)
        v = rand((1, 8), 4)
        f = Tensor(np.repeat(v, 4, axis=0))
        s_attr = Tensor(rand((2, 8), 5))
        out, _ = layer.forward([f], s_attr)
        eff = Tensor(2.0 * f.data)
        oracle = E._resnorm(
            f,
            layer.vis_self.forward(eff, f, f),
            layer.vis_text.forward(eff, s_attr, s_attr))
        assert np.max(np.abs(out[0].data - oracle.data)) < 1e-12

    def test_text_update_changes_tokens(self):
        layer = AttributeSpatialLayer(HeadConfig(2, 8), (2, 2), "ats",
                                      np.random.default_rng(6))
        s_attr = Tensor(rand((2, 8), 7))
        frames = [Tensor(rand((4, 8), 8))]
        _, new_text = layer.forward(frames, s_attr)
        assert new_text.shape == s_attr.shape
        assert not np.array_equal(new_text.data, s_attr.data)


class TestActionSpatial:
    def test_single_frame_is_own_neighbor(self):
        cfg = HeadConfig(2, 8)
        layer = ActionSpatialLayer(cfg, "acs", np.random.default_rng(0))
        f = Tensor(rand((4, 8), 1))
        s_act = Tensor(rand((1, 8), 2))
        out, _ = layer.forward([f], s_act)
        eff = Tensor(3.0 * f.data)
        oracle = E._resnorm(
            f,
            layer.vis_self.forward(eff, f, f),
            layer.vis_text.forward(eff, s_act, s_act))
        assert np.max(np.abs(out[0].data - oracle.data)) < 1e-10

    def test_three_identical_frames_match_tripled_oracle(self):
        cfg = HeadConfig(2, 8)
        layer = ActionSpatialLayer(cfg, "acs", np.random.default_rng(3))
        f = Tensor(rand((4, 8), 4))
        s_act = Tensor(rand((1, 8), 5))
        outs, _ = layer.forward([f, f, f], s_act)
        eff = Tensor(3.0 * f.data)
        oracle = E._resnorm(
            f,
            layer.vis_self.forward(eff, f, f),
            layer.vis_text.forward(eff, s_act, s_act))
        for out in outs:
            assert np.max(np.abs(out.data - oracle.data)) < 1e-10

    def test_neighborhood_is_adjacent_only(self):
        # with >= 5 consistent frames, frame 0's update reads frames
        # {n-1, 0, 1}; perturbing frame 2 must leave it bit-identical
        layer = ActionSpatialLayer(HeadConfig(2, 8), "acs",
                                   np.random.default_rng(6))
        frames = [Tensor(rand((4, 8), 10 + i)) for i in range(5)]
        s_act = Tensor(rand((1, 8), 20))
        out1, _ = layer.forward(frames, s_act)
        frames2 = list(frames)
        frames2[2] = Tensor(frames[2].data + 4.0)
        out2, _ = layer.forward(frames2, s_act)
        assert np.array_equal(out1[0].data, out2[0].data)
        assert not np.array_equal(out1[1].data, out2[1].data)


class TestActionTemporal:
    def make(self, seed=0):
        return ActionTemporalLayer(HeadConfig(2, 8), "act",
                                   np.random.default_rng(seed))

    def test_single_flow_forward_isolation(self):
        layer = self.make()
        tokens = rand((5, 8), 1)
        sent = Tensor(rand((3, 8), 2))
        s_act = Tensor(rand((1, 8), 3))
        out1 = layer.forward(Tensor(tokens), [0, 1], [2, 3, 4], sent, s_act)
        bumped = tokens.copy()
        bumped[3] += 9.0
        out2 = layer.forward(Tensor(bumped), [0, 1], [2, 3, 4], sent, s_act)
        assert np.array_equal(out1.data[[0, 1]], out2.data[[0, 1]])
        assert not np.array_equal(out1.data[3], out2.data[3])

    def test_single_flow_zero_gradient(self):
        layer = self.make(seed=4)
        tokens = Parameter("tokens", rand((4, 8), 5))
        sent = Tensor(rand((3, 8), 6))
        s_act = Tensor(rand((1, 8), 7))
        T.zero_grad([tokens])
        out = layer.forward(tokens, [0, 1], [2, 3], sent, s_act)
        # a loss reading only the consistent outputs must not touch
        # independent inputs
        T.tsum(T.take_rows(out, [0, 1]) * T.take_rows(out, [0, 1])).backward()
        assert np.array_equal(tokens.grad[2], np.zeros(8))
        assert np.array_equal(tokens.grad[3], np.zeros(8))
        assert np.any(tokens.grad[0] != 0)

    def test_consistent_perturbation_reaches_independent(self):
        layer = self.make(seed=8)
        tokens = rand((4, 8), 9)
        sent = Tensor(rand((3, 8), 10))
        s_act = Tensor(rand((1, 8), 11))
        out1 = layer.forward(Tensor(tokens), [0], [1, 2, 3], sent, s_act)
        bumped = tokens.copy()
        bumped[0] += 1.0
        out2 = layer.forward(Tensor(bumped), [0], [1, 2, 3], sent, s_act)
        assert not np.array_equal(out1.data[1], out2.data[1])

    def test_all_consistent_skips_independent_branch(self):
        layer = self.make(seed=12)
        tokens = Tensor(rand((3, 8), 13))
        sent = Tensor(rand((2, 8), 14))
        s_act = Tensor(rand((1, 8), 15))
        out = layer.forward(tokens, [0, 1, 2], [], sent, s_act)
        assert out.shape == (3, 8)


class TestEncoderLoop:
    def make(self, n_iters=2, seed=0, dim=8):
        cfg = EncoderConfig(HeadConfig(2, dim), n_encoder_iters=n_iters,
                            n_decoder_layers=1, queries_per_frame=2)
        enc = HierarchicalEncoder(cfg, (2, 2), "enc",
                                  np.random.default_rng(seed))
        return enc

    def test_zero_iterations_is_identity(self):
        enc = self.make(n_iters=0)
        video = make_video()
        query = make_query()
        out_v, out_q = enc.forward(video, query, [0, 1], [2])
        for a, b in zip(out_v.patches, video.patches):
            assert np.array_equal(a.data, b.data)
        assert np.array_equal(out_v.frame_tokens.data,
                              video.frame_tokens.data)
        assert np.array_equal(out_q.tokens.data, query.tokens.data)

    def test_one_iteration_matches_manual_composition(self):
        enc = self.make(n_iters=1, seed=2)
        video = make_video(seed=30)
        query = make_query(seed=31)
        out_v, out_q = enc.forward(video, query, [0, 2], [1])

        patches = list(video.patches)
        tokens = query.tokens
        s_attr = T.take_rows(tokens, query.attr_idx)
        s_act = T.take_rows(tokens, query.act_idx)
        patches, s_attr = enc.attr_spatial.forward(patches, s_attr, True)
        tokens = T.scatter_rows(tokens, query.attr_idx, s_attr)
        cons = [patches[0], patches[2]]
        cons, s_act = enc.act_spatial.forward(cons, s_act, True)
        patches[0], patches[2] = cons
        tokens = T.scatter_rows(tokens, query.act_idx, s_act)
        frame_tokens = enc.act_temporal.forward(
            video.frame_tokens, [0, 2], [1], tokens,
            T.take_rows(tokens, query.act_idx))
        patches = [E._resnorm(p, enc.ff_vis(p)) for p in patches]
        frame_tokens = E._resnorm(frame_tokens, enc.ff_vis(frame_tokens))
        tokens = E._resnorm(tokens, enc.ff_text(tokens))

        for a, b in zip(out_v.patches, patches):
            assert np.array_equal(a.data, b.data)
        assert np.array_equal(out_v.frame_tokens.data, frame_tokens.data)
        assert np.array_equal(out_q.tokens.data, tokens.data)

    @pytest.mark.parametrize("n_iters", [0, 1, 2])
    def test_shape_preservation(self, n_iters):
        enc = self.make(n_iters=n_iters, seed=5)
        video = make_video(seed=40)
        query = make_query(seed=41)
        out_v, out_q = enc.forward(video, query, [1], [0, 2])
        assert out_v.frame_tokens.shape == video.frame_tokens.shape
        assert [p.shape for p in out_v.patches] == \
            [p.shape for p in video.patches]
        assert out_q.tokens.shape == query.tokens.shape

    def test_flat_encoder_shapes(self):
        cfg = EncoderConfig(HeadConfig(2, 8), n_encoder_iters=1,
                            n_decoder_layers=1, queries_per_frame=2)
        enc = FlatEncoder(cfg, "flat", np.random.default_rng(0))
        video = make_video(seed=60)
        query = make_query(seed=61)
        out_v, out_q = enc.forward(video, query, [0], [1, 2])
        assert out_v.frame_tokens.shape == video.frame_tokens.shape
        assert out_q.tokens.shape == query.tokens.shape


class TestDecoder:
    def make(self, queries=2, layers=1, dim=8, seed=0):
        cfg = EncoderConfig(HeadConfig(2, dim), n_encoder_iters=1,
                            n_decoder_layers=layers,
                            queries_per_frame=queries)
        return Decoder(cfg, "dec", np.random.default_rng(seed))

    def test_output_shape(self):
        dec = self.make(queries=1)
        outs = dec.forward(make_video(seed=70), make_query(seed=71))
        assert len(outs) == 3
        assert all(o.shape == (1, 8) for o in outs)

    def test_cross_attention_rows_sum_to_one(self):
        dec = self.make(queries=3, seed=2)
        video = make_video(seed=72)
        query = make_query(seed=73)
        layer = dec.layers[0]
        x = E._resnorm(dec.query_embed,
                       layer.self_attn(dec.query_embed, dec.query_embed,
                                       dec.query_embed))
        ftok = T.take_rows(video.frame_tokens, [0])
        memory = T.concat([video.patches[0], ftok, query.tokens], axis=0)
        _, raw = layer.cross_attn.forward(x, memory, memory,
                                          return_scores=True)
        for s in raw:
            e = np.exp(s.data - s.data.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9

    def test_separate_layer_parameters(self):
        dec = self.make(layers=2, seed=3)
        names = [p.name for p in dec.parameters()]
        assert len(names) == len(set(names))
        assert any("layer0" in n for n in names)
        assert any("layer1" in n for n in names)


class TestPredictBoxes:
    def make_head(self, seed=0):
        return BoxHead(8, "head", np.random.default_rng(seed))

    def test_boxes_in_unit_interval(self):
        head = self.make_head()
        cands, chosen = predict_boxes(head, [Tensor(rand((4, 8), 1))])
        for box, conf in cands[0]:
            assert 0.0 < box.cx < 1.0 and 0.0 < box.w < 1.0
            assert 0.0 < conf < 1.0
        assert len(chosen) == 1

    def test_argmax_confidence(self):
        head = self.make_head(seed=2)
        cands, chosen = predict_boxes(head, [Tensor(rand((4, 8), 3))])
        confs = [c for _, c in cands[0]]
        assert chosen[0][0] == int(np.argmax(confs))

    def test_zero_preactivation_gives_midpoint_box(self):
        head = self.make_head(seed=4)
        head.box.w.data[:] = 0.0
        head.box.b.data[:] = 0.0
        _, chosen = predict_boxes(head, [Tensor(rand((2, 8), 5))])
        _, box, _ = chosen[0]
        assert (box.cx, box.cy, box.w, box.h) == (0.5, 0.5, 0.5, 0.5)

    def test_tied_confidences_take_lowest_index(self):
        head = self.make_head(seed=6)
        head.conf.w.data[:] = 0.0
        head.conf.b.data[:] = 0.0
        _, chosen = predict_boxes(head, [Tensor(rand((3, 8), 7))])
        assert chosen[0][0] == 0


class TestEncoderGradients:
    def test_small_encoder_decoder_gradcheck(self):
        dim = 8
        cfg = EncoderConfig(HeadConfig(2, dim), n_encoder_iters=1,
                            n_decoder_layers=1, queries_per_frame=2)
        rng = np.random.default_rng(0)
        enc = HierarchicalEncoder(cfg, (2, 2), "enc", rng)
        dec = Decoder(cfg, "dec", rng)
        head = BoxHead(dim, "head", rng)
        patch_params = [Parameter(f"patch{i}", rand((4, dim), i))
                        for i in range(2)]
        ftok = Parameter("ftok", rand((2, dim), 10))
        text = Parameter("text", rand((3, dim), 11))

        def f():
            video = VideoFeatures((2, 2), list(patch_params), ftok)
            query = QuerySplit(text, [0, 1], [2])
            out_v, out_q = enc.forward(video, query, [0], [1])
            outs = dec.forward(out_v, out_q)
            total = None
            for o in outs:
                b, c = head.forward(o)
                term = T.tsum(b) + T.tsum(T.sigmoid(c))
                total = term if total is None else total + term
            return total

        params = (patch_params + [ftok, text] + enc.parameters()
                  + dec.parameters() + head.parameters())
        assert grad_check(f, params) < 1e-4
