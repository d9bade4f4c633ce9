use pyo3::prelude::*;

#[pymodule]
fn cascade_volcomp_py(_py: Python<'_>, _m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
