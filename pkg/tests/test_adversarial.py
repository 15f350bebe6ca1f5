import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advpose.adversarial import (
    AdversarialState,
    ControllerFault,
    convergence_measure,
    loss_adv,
    loss_discriminator,
    loss_generator_total,
    loss_mse,
    update_kt,
)
from advpose.tensor import Tensor, backward, reset_tape

finite_loss = st.floats(min_value=0.0, max_value=1e6, allow_nan=False, allow_infinity=False)


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


class TestLosses:
    def test_every_stack_counts_against_the_same_target(self):
        # two stacks, both off by one everywhere: 2 * (M*r*r) with B=1
        target = Tensor(np.zeros((1, 1, 2, 2)))
        preds = [Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2)))]
        assert loss_mse(preds, target).item() == pytest.approx(8.0, abs=1e-12)

    def test_batch_mean_reduction(self):
        target = Tensor(np.zeros((4, 1, 2, 2)))
        preds = [Tensor(np.ones((4, 1, 2, 2)))]
        assert loss_mse(preds, target).item() == pytest.approx(4.0, abs=1e-12)

    def test_adv_equals_fake_on_shared_forward(self):
        rng = np.random.default_rng(0)
        pred = Tensor(rng.normal(size=(2, 3, 4, 4)))
        recon = Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert loss_adv(pred, recon).item() == loss_adv(pred, recon).item()

    def test_generator_total_identity(self):
        state = AdversarialState(lambda_g=0.01)
        rng = np.random.default_rng(1)
        l_mse = Tensor(np.asarray(abs(rng.normal())))
        l_adv = Tensor(np.asarray(abs(rng.normal())))
        total = loss_generator_total(l_mse, l_adv, state)
        assert abs(total.item() - (l_mse.item() + 0.01 * l_adv.item())) <= 1e-12

    def test_discriminator_total_identity(self):
        state = AdversarialState(k_t=0.37)
        l_real = Tensor(np.asarray(2.5))
        l_fake = Tensor(np.asarray(1.25))
        total = loss_discriminator(l_real, l_fake, state)
        assert abs(total.item() - (2.5 - 0.37 * 1.25)) <= 1e-12

    def test_loss_gradients_flow_through_composition(self):
        pred = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        recon = Tensor(np.zeros((1, 1, 2, 2)))
        state = AdversarialState(lambda_g=0.5)
        total = loss_generator_total(
            loss_mse([pred], Tensor(np.zeros((1, 1, 2, 2)))), loss_adv(pred, recon), state
        )
        backward(total)
        # d/dp of (p^2 + 0.5 p^2) per element with p=1
        assert np.allclose(pred.grad, 3.0, atol=1e-12)


class TestController:
    def test_documented_example(self):
        state = AdversarialState(k_t=0.0, lambda_k=0.001, gamma=0.5)
        new = update_kt(state, l_real=1.0, l_fake=0.2)
        assert new.k_t == pytest.approx(0.0003, abs=1e-15)

    def test_random_walk_stays_in_unit_interval(self):
        rng = np.random.default_rng(2)
        state = AdversarialState(k_t=0.5, lambda_k=0.05)
        for _ in range(10_000):
            state = update_kt(state, float(rng.uniform(0, 50)), float(rng.uniform(0, 50)))
            assert 0.0 <= state.k_t <= 1.0

    @given(k=st.floats(0, 1), l_real=finite_loss, gamma=st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_fixed_point_when_fake_matches_gamma_real(self, k, l_real, gamma):
        state = AdversarialState(k_t=k, lambda_k=0.001, gamma=gamma)
        new = update_kt(state, l_real, gamma * l_real)
        assert abs(new.k_t - k) <= 1e-15

    @given(l_real=finite_loss, l_fake=finite_loss, gamma=st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_convergence_measure_non_negative(self, l_real, l_fake, gamma):
        assert convergence_measure(l_real, l_fake, gamma) >= 0.0

    def test_non_finite_losses_fault(self):
        state = AdversarialState()
        with pytest.raises(ControllerFault):
            update_kt(state, float("nan"), 1.0)
        with pytest.raises(ControllerFault):
            update_kt(state, 1.0, float("inf"))

    def test_state_validation(self):
        with pytest.raises(ControllerFault):
            AdversarialState(k_t=1.5).validate()
        AdversarialState().validate()
