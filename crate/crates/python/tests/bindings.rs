//! Runs the Python smoke test against the module compiled into this test
//! binary through an embedded interpreter.

use std::ffi::CString;

use mitobench_py::init_module;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn python_smoke_script_passes() {
    pyo3::append_to_inittab!(init_module);
    Python::initialize();
    let script = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../python/smoke_test.py")).unwrap();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("__name__", "smoke").unwrap();
        py.run(&CString::new(script).unwrap(), Some(&globals), None).unwrap();
        let main = globals.get_item("main").unwrap().expect("main defined");
        let result = main.call0();
        if let Err(e) = &result {
            e.display(py);
        }
        let code: i32 = result.unwrap().extract().unwrap();
        assert_eq!(code, 0);
    });
}
