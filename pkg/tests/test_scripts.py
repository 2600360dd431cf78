import numpy as np

from patchrepair.fileio import read_nnet, write_nnet
from scripts import acas_property2, worked_example


def test_worked_example_script_runs(capsys):
    worked_example.main()
    out = capsys.readouterr().out
    assert "given forms: provable=True" in out and "analyzer: provable=True" in out


def test_fake_acas_network_has_property2_violations(tmp_path):
    path = tmp_path / "fake.nnet"
    write_nnet(acas_property2.fake_network(3), path)
    net = read_nnet(path)
    X = acas_property2.counterexamples(net, 5, 0.002, np.random.default_rng(0))
    assert len(X) == 5
    assert np.all(np.argmax(net.forward(X), axis=1) == acas_property2.COC)
    assert all(acas_property2.PROPERTY_BOX.contains(x) for x in X)


def test_acas_repair_on_fake_network(tmp_path):
    path = tmp_path / "fake.nnet"
    write_nnet(acas_property2.fake_network(0), path)
    rows = acas_property2.run_property2([path], n_counterexamples=20)
    assert rows[0]["counterexamples"] == 20
    assert rows[0]["rsr"] == 100.0 and rows[0]["provable"]
    assert rows[0]["fdd"] is not None
