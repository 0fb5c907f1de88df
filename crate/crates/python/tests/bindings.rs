//! Drives the bindings through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(stratcheck::stratcheck)(py);
        let sys = py.import("sys").unwrap();
        sys.getattr("modules").unwrap().set_item("stratcheck", &module).unwrap();
        let globals = PyDict::new(py);
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python code failed: {e}");
        }
    });
}

#[test]
fn subspaces_and_expressions() {
    run(c"
import math
import stratcheck as sc
p = sc.Subspace(3, [[1.0, 0.0, 0.0]])
q = sc.Subspace(3, [[1.0, 1.0, 0.0]])
assert abs(sc.angle(p, q) - math.sqrt(0.5)) < 1e-12
assert abs(sc.symmetric_angle(p, q) - math.sqrt(0.5)) < 1e-12
e = sc.Expression('x^2 + sqrt(y)', ['x', 'y'])
assert e.gradient([3.0, 4.0]) == [6.0, 0.25]
try:
    sc.Expression('x +', ['x'])
except sc.StratcheckError:
    pass
else:
    raise AssertionError('parse error expected')
");
}

#[test]
fn hat_apex_fault_and_round_trip() {
    run(c"
import stratcheck as sc
hat = sc.StrataSet.fixture('santa_hat')
assert sc.StrataSet.from_json(hat.to_json()).to_json() == hat.to_json()
pair = hat.pair('X,Y')
v = pair.check_a([1.0, 0.0, 0.0])
assert v.status == 'fault' and 0.4 <= v.score <= 0.6, v
assert pair.sing_a([1.0, 0.0, 0.0]).status == 'regular'
assert abs(pair.p_a([0.0, 1.0, 0.0], [0.0, 1.5, 0.0])) < 1e-12
");
}

#[test]
fn budget_errors_map_to_their_class() {
    run(c"
import stratcheck as sc
circle = sc.StrataSet.fixture('santa_hat').stratum('circle')
try:
    sc.flatten(circle, 0.5, max_pieces=4)
except sc.BudgetError:
    pass
else:
    raise AssertionError('BudgetError expected')
assert sc.BudgetError.__mro__[1] is sc.StratcheckError
code, out, err = sc.run_cli(['check-a', '--set', 'nope', '--point', '0'])
assert code == 3 and out.startswith('# stratcheck') and 'nope' in err
");
}
