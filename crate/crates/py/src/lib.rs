use pyo3::prelude::*;

#[pymodule]
fn mvdepth(_py: Python<'_>, _m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
