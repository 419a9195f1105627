use pyo3::prelude::*;

#[pymodule]
fn repalign_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
