import numpy as np
import pytest

from fedadapt import baselines, csm, data, fl, fsc, nn, synthetic
from fedadapt.errors import ConfigurationError, StageError


@pytest.fixture(scope="module")
def federation():
    images, labels = synthetic.make_glyphs(30, 12, seed=3)
    ds = data.LabeledDataset((images.astype(np.float32) / 255)[:, None], labels.astype(np.int64), 10)
    return data.partition_class_imbalance(ds, n_clients=10, n_types=5, samples_per_split=12, seed=0)


@pytest.fixture(scope="module")
def m_f(federation):
    config = fl.FLConfig(rounds=2, lr=0.05, batch_size=5, seed=1)
    model, _ = fl.run_federated_learning(federation, "mlp", config)
    return model


ADAPT = csm.AdaptationConfig(adaptation_rounds=3, local_epochs=2, lr=0.05, momentum=0.5, batch_size=5, seed=7)


def test_single_group_equals_continued_fl(federation, m_f):
    result = baselines.federated_adaptation(m_f, federation, ADAPT)
    continued, _ = fl.run_federated_learning(federation, m_f, ADAPT.fl_config())
    assert result.group_models[0].params.flat.tobytes() == continued.params.flat.tobytes()
    assert result.assignment.group_count == 1


def test_singleton_groups_equal_local_finetune(federation, m_f):
    assignment = fsc.GroupAssignment({c: c - 1 for c in federation.client_ids})
    grouped = csm.group_wise_adaptation(m_f, federation, assignment, ADAPT)
    finetuned = baselines.finetune_all(m_f, federation, ADAPT)
    for c in federation.client_ids:
        a = grouped.model_for(c).params.flat
        b = finetuned.model_for(c).params.flat
        assert a.tobytes() == b.tobytes()
    assert grouped.client_accuracy == finetuned.client_accuracy


def test_groups_start_from_federated_model(federation, m_f):
    before = m_f.params.flat.copy()
    assignment = fsc.GroupAssignment.from_partition([[1, 2], [3, 4, 5, 6, 7, 8, 9, 10]])
    result = csm.group_wise_adaptation(m_f, federation, assignment, ADAPT)
    assert m_f.params.flat.tobytes() == before.tobytes()
    # group 0 is independent of whatever the other group contains
    alone = fl.train_rounds(m_f, [federation.client(1), federation.client(2)], ADAPT.fl_config())[0]
    assert result.group_models[0].params.flat.tobytes() == alone.params.flat.tobytes()
    assert set(result.history) == {0, 1} and len(result.history[0]) == 3


def test_threads_do_not_change_results(federation, m_f):
    assignment = fsc.GroupAssignment.from_partition([[1, 3, 5], [2, 4, 6, 7, 8, 9, 10]])
    a = csm.group_wise_adaptation(m_f, federation, assignment, ADAPT)
    b = csm.group_wise_adaptation(m_f, federation, assignment, ADAPT, threads=3)
    for g in a.group_models:
        assert a.group_models[g].params.flat.tobytes() == b.group_models[g].params.flat.tobytes()


def test_missing_client_rejected(federation, m_f):
    with pytest.raises(ConfigurationError):
        csm.group_wise_adaptation(m_f, federation, fsc.GroupAssignment({1: 0}), ADAPT)


def test_local_finetune_sessions(federation, m_f):
    client = federation.client(3)
    one = baselines.local_finetune(m_f, client, 4, 0.05, 0.5, 5, seed=2)
    direct = m_f.with_params(fl.local_train(m_f, client, 4, 0.05, 0.5, 5, fl.client_round_seed(2, 0, 3)))
    assert one.params.flat.tobytes() == direct.params.flat.tobytes()
    split = baselines.local_finetune(m_f, client, 4, 0.05, 0.5, 5, seed=2, session_epochs=2)
    assert split.params.flat.tobytes() != one.params.flat.tobytes()
    zero = baselines.local_finetune(m_f, client, 0, 0.05, 0.5, 5, seed=2)
    assert zero.params.flat.tobytes() == m_f.params.flat.tobytes()


def test_random_assignment(federation):
    a = baselines.random_assignment(federation.client_ids, 5, seed=4)
    assert a.group_count == 5
    assert sorted(len(p) for p in a.partition()) == [2] * 5
    assert a == baselines.random_assignment(federation.client_ids, 5, seed=4)
    assert baselines.random_assignment(list(range(1, 8)), 3, 0).group_count == 3
    with pytest.raises(ValueError):
        baselines.random_assignment([1, 2], 3, 0)


def test_baseline_accuracy_is_unadapted(federation, m_f):
    acc = baselines.baseline_accuracy(m_f, federation)
    assert acc == {c.client_id: fl.evaluate(m_f, c.test) for c in federation}


def test_pipeline_end_to_end(federation):
    fl_config = fl.FLConfig(rounds=2, lr=0.05, batch_size=5, seed=1)
    result = csm.run_pfa_pipeline(
        federation,
        "small-cnn",
        fl_config,
        csm.PFEConfig(relu_index=1, q=8, seed=0),
        csm.AdaptationConfig(adaptation_rounds=1, batch_size=5),
        csm.FSCConfig(mode="full", expected_groups=5),
    )
    assert result.assignment.group_count == 5
    assert len(result.representations) == 10
    assert set(result.personalization.client_accuracy) == set(federation.client_ids)
    assert 0 <= result.personalization.mean_accuracy <= 1
    again = csm.run_pfa_pipeline(
        federation,
        "small-cnn",
        fl_config,
        csm.PFEConfig(relu_index=1, q=8, seed=0),
        csm.AdaptationConfig(adaptation_rounds=1, batch_size=5),
        csm.FSCConfig(mode="full", expected_groups=5),
        federated=(result.federated_model, result.fl_history),
    )
    assert again.assignment == result.assignment


def test_pipeline_stage_errors(federation):
    model = nn.build_model(nn.architecture("small-cnn"), (1, 12, 12), seed=0)
    with pytest.raises(StageError, match="stage 'pfe'"):
        csm.run_pfa_pipeline(
            federation,
            "small-cnn",
            fl.FLConfig(rounds=1),
            csm.PFEConfig(relu_index=1, q=99),
            ADAPT,
            federated=(model, []),
        )
    with pytest.raises(StageError, match="stage 'fsc'"):
        csm.run_pfa_pipeline(
            federation,
            "small-cnn",
            fl.FLConfig(rounds=1),
            csm.PFEConfig(relu_index=1, q=4),
            ADAPT,
            csm.FSCConfig(mode="full", expected_groups=11),
            federated=(model, []),
        )


def test_config_validation():
    with pytest.raises(ConfigurationError):
        csm.AdaptationConfig(adaptation_rounds=0)
    with pytest.raises(ConfigurationError):
        csm.FSCConfig(mode="pairs")
    assert csm.AdaptationConfig(adaptation_rounds=30, local_epochs=2).total_epochs == 60
