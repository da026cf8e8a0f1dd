use pyo3::prelude::*;

#[pymodule]
fn alignprobe_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
