//! Values printed by `tests/oracles/inconsistency.py`, an independent
//! from-scratch implementation.

use tia_core::autodiff::Tensor;
use tia_core::eval::iou;
use tia_core::losses::{cls_inconsistency, loc_inconsistency};

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn classification() {
    let one_hot = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    close(cls_inconsistency(&one_hot).unwrap(), -0.5822031088882179, 1e-12);

    let mixed = Tensor::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.25, 0.25, 0.5]]).unwrap();
    close(cls_inconsistency(&mixed).unwrap(), -1.0652912146112548, 1e-12);

    for n in [2, 4, 8, 16] {
        let m = Tensor::from_rows(&vec![[0.1, 0.6, 0.3]; n]).unwrap();
        close(cls_inconsistency(&m).unwrap(), -(n as f64).ln(), 1e-12);
    }
}

#[test]
fn localization() {
    let pair = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]]).unwrap();
    close(loc_inconsistency(&pair).unwrap(), 0.25, 1e-12);

    let three = Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4], [0.5, -0.1, 0.2, 0.3], [0.0, 0.0, 1.0, 0.25]]).unwrap();
    close(loc_inconsistency(&three).unwrap(), 0.18975254192166738, 1e-12);
}

#[test]
fn overlap() {
    close(iou(&[0.5, 0.5, 1.0, 1.0], &[1.0, 0.5, 1.0, 1.0]).unwrap(), 1.0 / 3.0, 1e-12);
    close(iou(&[0.0, 0.0, 2.0, 1.0], &[0.1, 0.0, 0.5, 0.5]).unwrap(), 0.125, 1e-12);
}
