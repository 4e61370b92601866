import numpy as np
import pytest

from volformer.architectures import build_model, resnet50
from volformer.checkpoint import load_checkpoint, save_checkpoint
from volformer.nn import Conv, ParamInit
from volformer.presets import full_scale_config, toy_config
from volformer.profiler import count_macs, count_params, time_inference


class TestMacCounting:
    def test_conv_hand_count(self):
        conv = Conv(1, 4, 3, ParamInit(0), padding=1)
        out_shape, rows = conv.trace((1, 8, 8))
        assert out_shape == (4, 8, 8)
        assert rows[0].macs == 2304  # 8*8*4*9

    def test_linear_macs(self):
        from volformer.nn import Linear
        _, rows = Linear(16, 3, ParamInit(0)).trace((16,))
        assert rows[0].macs == 48
        assert rows[0].params == 16 * 3 + 3

    def test_totals_equal_row_sums(self):
        graph = build_model(toy_config("2d_trf"))
        report = count_macs(graph)
        assert report.total_macs == sum(r.macs for r in report.rows)
        assert report.total_params == sum(r.params for r in report.rows)

    def test_norm_activation_pool_rows_are_zero_macs(self):
        graph = build_model(toy_config("2d_trf"))
        report = count_macs(graph)
        for row in report.rows:
            if row.kind in ("norm", "pool"):
                assert row.macs == 0

    def test_counts_independent_of_parameter_values(self):
        graph = build_model(toy_config("2d_trf"), seed=1)
        before = count_macs(graph)
        for _, p in graph.module.named_parameters():
            p.tensor.data[:] = np.random.default_rng(0).normal(size=p.shape)
        after = count_macs(graph)
        assert before.total_macs == after.total_macs
        assert before.total_params == after.total_params

    def test_doubling_k_doubles_encoder_and_quadruples_scores(self):
        cfg8 = toy_config("2d_trf", slice_count=8)
        cfg16 = toy_config("2d_trf", slice_count=16)
        r8 = count_macs(build_model(cfg8))
        r16 = count_macs(build_model(cfg16))

        def bucket(report, match):
            return sum(r.macs for r in report.rows if match in r.name)

        assert bucket(r16, "encoder") == 2 * bucket(r8, "encoder")
        score_ratio = bucket(r16, "attn_scores") / bucket(r8, "attn_scores")
        assert score_ratio == pytest.approx((2 * 8 + 1) ** 2 / (8 + 1) ** 2, rel=1e-12)
        # with the full-scale slice count the quadratic term is ~4x
        r64 = count_macs(build_model(toy_config("2d_trf", slice_count=64)))
        r128 = count_macs(build_model(toy_config("2d_trf", slice_count=128)))
        big_ratio = bucket(r128, "attn_scores") / bucket(r64, "attn_scores")
        assert abs(big_ratio - 4.0) < 0.4

    def test_attention_subtotals_emitted_separately(self):
        report = count_macs(build_model(toy_config("2d_trf")))
        names = [r.name for r in report.rows]
        assert any("attn_proj" in n for n in names)
        assert any("attn_scores" in n for n in names)

    def test_reconciliation_notes_present(self):
        report = count_macs(build_model(full_scale_config("2d_fc")))
        assert report.notes["fc_hidden"] == 512
        report = count_macs(build_model(full_scale_config("2d_bilstm")))
        assert report.notes["lstm_hidden"] == 256


class TestParamCounting:
    def test_resnet50_exact(self):
        assert resnet50().param_count() == 25_557_032

    def test_count_params_cross_checks_registry(self):
        report = count_params(build_model(toy_config("2d_bilstm")))
        assert report.total_params > 0

    def test_toy_count_equals_checkpoint_sum(self, tmp_path):
        graph = build_model(toy_config("2d_trf"), seed=3)
        path = tmp_path / "toy.vfwt"
        save_checkpoint(path, graph.state_dict())
        back = load_checkpoint(path)
        param_names = {n for n, _ in graph.module.named_parameters()}
        assert param_names <= set(back)
        brute = sum(arr.size for name, arr in back.items() if name in param_names)
        assert count_params(graph).total_params == brute

    def test_tokens_and_positional_included(self):
        cfg = toy_config("2d_trf", slice_count=8)
        report = count_macs(build_model(cfg))
        token_rows = [r for r in report.rows if r.kind == "embedding"]
        d = cfg.aggregator.model_dim
        assert sum(r.params for r in token_rows) == d + (8 + 1) * d  # cls + positional


class TestTiming:
    def test_toy_inference_under_one_second(self):
        graph = build_model(toy_config("2d_trf"))
        report = time_inference(graph, warmup=2, runs=10)
        assert report.runnable
        assert report.median_ms < 1000.0
        assert report.hardware

    def test_timing_stability_gate(self):
        # wall-clock gate: retry a couple of times to ride out scheduler noise
        graph = build_model(toy_config("2d_trf"))
        ratios = []
        for _ in range(3):
            report = time_inference(graph, warmup=5, runs=30)
            ratios.append(report.iqr_ms / report.median_ms)
            if ratios[-1] < 0.3:
                return
        pytest.fail(f"IQR/median stayed at {ratios} >= 0.3 across retries")

    def test_timing_monotone_in_slice_count(self):
        for _ in range(3):
            t8 = time_inference(build_model(toy_config("2d_trf", slice_count=8)),
                                warmup=3, runs=15)
            t16 = time_inference(build_model(toy_config("2d_trf", slice_count=16)),
                                 warmup=3, runs=15)
            if t16.median_ms > t8.median_ms:
                return
        pytest.fail(f"k=16 ({t16.median_ms:.2f} ms) not slower than k=8 ({t8.median_ms:.2f} ms)")
