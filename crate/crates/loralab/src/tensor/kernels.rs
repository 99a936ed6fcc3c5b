//! Row-major matrix kernels shared by the graph ops.
//!
//! The `ikj` loop order keeps the inner loop contiguous in both `b` and `c`,
//! which is all the optimization these desk-scale problems need. Products
//! accumulate in double precision and round once on the way out, so single
//! precision results stay within an ulp or two of the exact dot product.

use super::Element;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let acc_row = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = Element::to_f64(a[i * k + p]);
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                acc_row[j] += aip * Element::to_f64(b_row[j]);
            }
        }
    }
    acc.into_iter().map(E::from_f64).collect()
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = 0.0f64;
            for p in 0..n {
                acc += Element::to_f64(a_row[p]) * Element::to_f64(b_row[p]);
            }
            c[i * k + j] = E::from_f64(acc);
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = Element::to_f64(a[i * k + p]);
            if aip == 0.0 {
                continue;
            }
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for j in 0..n {
                acc_row[j] += aip * Element::to_f64(b_row[j]);
            }
        }
    }
    acc.into_iter().map(E::from_f64).collect()
}

/// Out-of-place transpose of a row-major `m×n` buffer.
pub fn transpose<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut t = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
