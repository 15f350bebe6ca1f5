import numpy as np
import pytest

from advpose.network import (
    NetworkConfig,
    build_discriminator,
    build_generator,
    forward_discriminator,
    forward_generator,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from advpose.tensor import (
    ContractViolation,
    RngStream,
    Tensor,
    backward,
    grad_check,
    mse_sum,
    no_grad,
    reset_tape,
)


def tiny_cfg(**kw):
    base = dict(
        num_stacks=1,
        num_joints=4,
        input_res=32,
        heatmap_res=8,
        base_channels=16,
        hourglass_depth=2,
        conditional=False,
    )
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


class TestConfig:
    def test_resolution_coupling_enforced(self):
        with pytest.raises(ContractViolation):
            tiny_cfg(heatmap_res=16).validate()

    def test_depth_divisibility_enforced(self):
        with pytest.raises(ContractViolation):
            tiny_cfg(hourglass_depth=4).validate()

    def test_desk_scale_default_is_valid(self):
        NetworkConfig().validate()


class TestForwardShapes:
    def test_generator_emits_one_heatmap_set_per_stack(self):
        cfg = tiny_cfg(num_stacks=2)
        net = build_generator(cfg, RngStream(0))
        outs = forward_generator(net, Tensor(np.zeros((2, 3, 32, 32))))
        assert len(outs) == 2
        for o in outs:
            assert o.shape == (2, 4, 8, 8)

    def test_discriminator_reconstructs_heatmap_block(self):
        cfg = tiny_cfg()
        d = build_discriminator(cfg, RngStream(1))
        out = forward_discriminator(d, Tensor(np.zeros((2, 4, 8, 8))))
        assert out.shape == (2, 4, 8, 8)

    def test_conditional_discriminator_takes_image(self):
        cfg = tiny_cfg(conditional=True)
        d = build_discriminator(cfg, RngStream(1))
        out = forward_discriminator(
            d, Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 3, 32, 32)))
        )
        assert out.shape == (1, 4, 8, 8)
        with pytest.raises(ContractViolation):
            forward_discriminator(d, Tensor(np.zeros((1, 4, 8, 8))))

    def test_wrong_resolution_rejected(self):
        net = build_generator(tiny_cfg(), RngStream(0))
        with pytest.raises(ContractViolation):
            forward_generator(net, Tensor(np.zeros((1, 3, 64, 64))))

    def test_outputs_finite_on_random_input(self):
        net = build_generator(tiny_cfg(), RngStream(3))
        x = RngStream(4).normal((2, 3, 32, 32))
        for training in (False, True):
            outs = forward_generator(net, Tensor(x), training=training)
            assert np.isfinite(outs[-1].data).all()

    def test_eval_mode_is_batch_independent(self):
        net = build_generator(tiny_cfg(), RngStream(5))
        rng = RngStream(6)
        a, b = rng.normal((1, 3, 32, 32)), rng.normal((1, 3, 32, 32))
        with no_grad():
            single = forward_generator(net, Tensor(a))[-1].data
            pair = forward_generator(net, Tensor(np.concatenate([a, b])))[-1].data
        assert np.array_equal(single[0], pair[0])


class TestDeterminismAndParity:
    def test_same_seed_builds_identical_parameters(self):
        n1 = build_generator(tiny_cfg(), RngStream(42))
        n2 = build_generator(tiny_cfg(), RngStream(42))
        for (name1, p1), (name2, p2) in zip(n1.named_parameters(), n2.named_parameters()):
            assert name1 == name2
            assert np.array_equal(p1.data, p2.data)

    def test_parity_with_unconditional_critic(self):
        cfg = tiny_cfg(num_stacks=1, conditional=False)
        g = build_generator(cfg, RngStream(0))
        d = build_discriminator(cfg, RngStream(0))
        gp, dp = g.named_parameters(), d.named_parameters()
        assert [n for n, _ in gp] == [n for n, _ in dp]
        for (name, pg), (_, pd) in zip(gp, dp):
            if name == "stem.conv1.weight":
                assert pg.data.shape[0] == pd.data.shape[0]
                assert pg.data.shape[2:] == pd.data.shape[2:]
                assert pg.data.shape[1] == 3 and pd.data.shape[1] == cfg.num_joints
            else:
                assert pg.data.shape == pd.data.shape, name

    def test_biases_zero_and_norms_neutral_at_init(self):
        net = build_generator(tiny_cfg(), RngStream(9))
        for name, p in net.named_parameters():
            if name.endswith(".bias") or name.endswith(".shift"):
                assert np.all(p.data == 0.0), name
            elif name.endswith(".scale"):
                assert np.all(p.data == 1.0), name


class TestCheckpoints:
    def test_roundtrip_is_bitwise(self, tmp_path):
        cfg = tiny_cfg()
        net = build_generator(cfg, RngStream(7))
        # give the running moments some non-initial values
        forward_generator(net, Tensor(RngStream(8).normal((2, 3, 32, 32))), training=True)
        path = tmp_path / "net.bin"
        save_checkpoint(net, path)
        other = build_generator(cfg, RngStream(1234))
        load_checkpoint(other, path)
        for (_, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
            assert np.array_equal(a.data, b.data)
        for (_, a), (_, b) in zip(net.named_state(), other.named_state()):
            assert np.array_equal(a, b)

    def test_format_is_little_endian_named_f64(self, tmp_path):
        # independent parse of the container layout
        import struct

        net = build_generator(tiny_cfg(), RngStream(2))
        path = tmp_path / "net.bin"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        assert raw[:4] == b"HGW1"
        version, count = struct.unpack_from("<II", raw, 4)
        assert version == 1
        names = []
        off = 12
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            names.append(raw[off : off + nlen].decode())
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim + 8 * int(np.prod(shape))
        assert off == len(raw)
        assert names[0] == "stem.conv1.weight"
        entries = read_checkpoint(path)
        first = net.named_parameters()[0][1].data
        assert np.array_equal(entries["stem.conv1.weight"], first)

    def test_mismatched_network_is_rejected(self, tmp_path):
        path = tmp_path / "net.bin"
        save_checkpoint(build_generator(tiny_cfg(), RngStream(0)), path)
        other = build_generator(tiny_cfg(num_stacks=2), RngStream(0))
        with pytest.raises(ContractViolation):
            load_checkpoint(other, path)

    def test_corrupt_file_is_rejected(self, tmp_path):
        path = tmp_path / "net.bin"
        save_checkpoint(build_generator(tiny_cfg(), RngStream(0)), path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(bytes(raw[: len(raw) // 2]))
        with pytest.raises(ContractViolation):
            read_checkpoint(path)
        path.write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(ContractViolation):
            read_checkpoint(path)


class TestGradientsThroughNetwork:
    def test_generator_loss_gradient_spot_check(self):
        cfg = tiny_cfg(base_channels=8, hourglass_depth=1)
        net = build_generator(cfg, RngStream(11))
        target = Tensor(RngStream(12).normal((1, 4, 8, 8)))
        base = RngStream(13).normal((1, 3, 32, 32))

        def f(x):
            return mse_sum(forward_generator(net, x, training=True)[-1], target)

        idx = RngStream(14).integers(0, base.size, shape=24)
        err = grad_check(f, Tensor(base, requires_grad=True), indices=[int(i) for i in idx])
        assert err < 1e-3

    def test_parameter_gradients_accumulate_across_backwards(self):
        net = build_generator(tiny_cfg(base_channels=8, hourglass_depth=1), RngStream(15))
        x = Tensor(RngStream(16).normal((1, 3, 32, 32)))
        t = Tensor(np.zeros((1, 4, 8, 8)))
        loss = mse_sum(forward_generator(net, x, training=True)[-1], t)
        backward(loss)
        first = {n: p.grad.copy() for n, p in net.named_parameters()}
        backward(loss)
        for n, p in net.named_parameters():
            assert np.max(np.abs(p.grad - 2.0 * first[n])) <= 1e-12, n
