use gibly_demo::{field_slice, radius_fit, radius_scan};

#[test]
fn cylinder_slice_peaks_on_the_axis() {
    let res = 41;
    let field = field_slice("cylinder", 0.3, 0.1, 0.25, 0.0, [0.0; 3], false, 1.0, res).unwrap();
    assert_eq!(field.len(), res * res);
    let mid = res / 2;
    // the z axis is the middle column; every value there is exactly 1
    assert!((0..res).all(|row| field[row * res + mid] == 1.0));
    assert!(field.iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn normalized_slice_changes_sign() {
    let field = field_slice("hollow_cylinder", 0.4, 0.05, 0.25, 0.0, [0.3, 0.0, 0.0], true, 1.0, 21).unwrap();
    assert!(field.iter().any(|&v| v > 0.0));
    assert!(field.iter().any(|&v| v < 0.0));
}

#[test]
fn bad_inputs_are_reported() {
    assert!(field_slice("pyramid", 0.3, 0.1, 0.25, 0.0, [0.0; 3], false, 1.0, 10).is_err());
    assert!(field_slice("disk", 0.3, 0.1, 0.25, 0.0, [0.0; 3], false, 1.0, 1).is_err());
    assert!(radius_scan(0.5, 0.0, 0.1, 0.5, 0.2, 10).is_err());
}

#[test]
fn scan_and_fit_agree_on_the_radius() {
    let scan = radius_scan(0.5, 0.0, 0.1, 0.1, 1.0, 91).unwrap();
    let best = scan.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!((0.1 + best as f64 * 0.01 - 0.5).abs() <= 0.01);
    let fit = radius_fit(0.5, 0.0, 0.1, 0.2, 500, 1e-2).unwrap();
    assert_eq!(fit.len(), 502);
    assert!((0.48..=0.52).contains(&fit[0]), "{}", fit[0]);
}
