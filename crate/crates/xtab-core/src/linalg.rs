//! Dense matrix products backing the training loops.
//!
//! The public surface works on `f64` ndarray matrices. With the `blas` feature a
//! system BLAS is loaded at runtime (via `dlopen`) and used for the products;
//! when no BLAS library can be found the portable ndarray kernels are used
//! instead, so the crate works everywhere, just slower.
//!
//! Products big enough to dominate a training step (the wide classifier layers)
//! are evaluated in single precision internally, which is the customary
//! precision for network training. Everything below [`F32_DISPATCH_MIN_MACS`]
//! multiply-accumulates — in particular all the small instances the analytic
//! gradient checks run on — stays in double precision end to end.

use ndarray::{Array2, ArrayView2};

/// Products with at least this many multiply-accumulates run in `f32`.
///
/// The cutoff sits far above every analytically-checked code path (those use a
/// handful of units) and below the batch-size-1024 classifier products.
pub const F32_DISPATCH_MIN_MACS: usize = 1 << 24;

/// `a · b`
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    gemm(a, false, b, false)
}

/// `a · bᵀ`
pub fn matmul_nt(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    gemm(a, false, b, true)
}

/// `aᵀ · b`
pub fn matmul_tn(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    gemm(a, true, b, false)
}

fn gemm(a: ArrayView2<f64>, ta: bool, b: ArrayView2<f64>, tb: bool) -> Array2<f64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(k, kb, "gemm: inner dimensions differ ({k} vs {kb})");

    let macs = m * n * k;
    let mut c = Array2::<f64>::zeros((m, n));

    #[cfg(feature = "blas")]
    if let Some(blas) = blas::handle() {
        let a = a.as_standard_layout();
        let b = b.as_standard_layout();
        if macs >= F32_DISPATCH_MIN_MACS {
            blas.sgemm_f64(ta, tb, m, n, k, &a, &b, &mut c);
        } else {
            blas.dgemm(ta, tb, m, n, k, &a, &b, &mut c);
        }
        return c;
    }

    // Portable path.
    if macs >= F32_DISPATCH_MIN_MACS {
        let af = a.mapv(|v| v as f32);
        let bf = b.mapv(|v| v as f32);
        let af = if ta { af.reversed_axes() } else { af };
        let bf = if tb { bf.reversed_axes() } else { bf };
        let mut cf = Array2::<f32>::zeros((m, n));
        ndarray::linalg::general_mat_mul(1.0, &af, &bf, 0.0, &mut cf);
        c.zip_mut_with(&cf, |o, &v| *o = v as f64);
    } else {
        let a = if ta { a.reversed_axes() } else { a };
        let b = if tb { b.reversed_axes() } else { b };
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    c
}

/// Name of the backend actually in use, for diagnostics.
pub fn backend_description() -> String {
    #[cfg(feature = "blas")]
    if let Some(b) = blas::handle() {
        return format!("system BLAS ({})", b.corename());
    }
    "portable (ndarray)".to_string()
}

#[cfg(feature = "blas")]
mod blas {
    use ndarray::{Array2, CowArray, Ix2};
    use std::ffi::{CStr, CString};
    use std::os::raw::{c_char, c_int, c_void};
    use std::sync::OnceLock;

    const CBLAS_ROW_MAJOR: c_int = 101;
    const CBLAS_NO_TRANS: c_int = 111;
    const CBLAS_TRANS: c_int = 112;

    #[allow(clippy::type_complexity)]
    type DgemmFn = unsafe extern "C" fn(
        c_int, c_int, c_int, c_int, c_int, c_int,
        f64, *const f64, c_int, *const f64, c_int, f64, *mut f64, c_int,
    );
    #[allow(clippy::type_complexity)]
    type SgemmFn = unsafe extern "C" fn(
        c_int, c_int, c_int, c_int, c_int, c_int,
        f32, *const f32, c_int, *const f32, c_int, f32, *mut f32, c_int,
    );
    type CorenameFn = unsafe extern "C" fn() -> *const c_char;

    pub struct Blas {
        dgemm: DgemmFn,
        sgemm: SgemmFn,
        corename: Option<CorenameFn>,
    }

    // The library handle is leaked on purpose: BLAS stays loaded for the
    // process lifetime.
    unsafe impl Send for Blas {}
    unsafe impl Sync for Blas {}

    static HANDLE: OnceLock<Option<Blas>> = OnceLock::new();

    pub fn handle() -> Option<&'static Blas> {
        HANDLE.get_or_init(load).as_ref()
    }

    impl Blas {
        pub fn corename(&self) -> String {
            match self.corename {
                Some(f) => unsafe { CStr::from_ptr(f()) }.to_string_lossy().into_owned(),
                None => "unknown core".to_string(),
            }
        }

        pub fn dgemm(
            &self,
            ta: bool,
            tb: bool,
            m: usize,
            n: usize,
            k: usize,
            a: &CowArray<f64, Ix2>,
            b: &CowArray<f64, Ix2>,
            c: &mut Array2<f64>,
        ) {
            let (lda, ldb) = (a.ncols() as c_int, b.ncols() as c_int);
            unsafe {
                (self.dgemm)(
                    CBLAS_ROW_MAJOR,
                    trans_flag(ta),
                    trans_flag(tb),
                    m as c_int,
                    n as c_int,
                    k as c_int,
                    1.0,
                    a.as_ptr(),
                    lda,
                    b.as_ptr(),
                    ldb,
                    0.0,
                    c.as_mut_ptr(),
                    n as c_int,
                );
            }
        }

        /// Single-precision product over `f64` data: stage, multiply, widen.
        pub fn sgemm_f64(
            &self,
            ta: bool,
            tb: bool,
            m: usize,
            n: usize,
            k: usize,
            a: &CowArray<f64, Ix2>,
            b: &CowArray<f64, Ix2>,
            c: &mut Array2<f64>,
        ) {
            let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let mut cf = vec![0.0f32; m * n];
            let (lda, ldb) = (a.ncols() as c_int, b.ncols() as c_int);
            unsafe {
                (self.sgemm)(
                    CBLAS_ROW_MAJOR,
                    trans_flag(ta),
                    trans_flag(tb),
                    m as c_int,
                    n as c_int,
                    k as c_int,
                    1.0,
                    af.as_ptr(),
                    lda,
                    bf.as_ptr(),
                    ldb,
                    0.0,
                    cf.as_mut_ptr(),
                    n as c_int,
                );
            }
            for (o, &v) in c.as_slice_mut().expect("c is freshly allocated").iter_mut().zip(&cf) {
                *o = v as f64;
            }
        }
    }

    fn trans_flag(t: bool) -> c_int {
        if t {
            CBLAS_TRANS
        } else {
            CBLAS_NO_TRANS
        }
    }

    /// Pick an OpenBLAS kernel set from the actual CPU features when the
    /// library's own detection would fall back to a generic one (seen on VMs
    /// that mask the CPU model string). Must run before the library is loaded,
    /// which is why loading happens lazily here rather than at link time.
    fn preset_environment() {
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            #[cfg(target_arch = "x86_64")]
            {
                let core = if std::arch::is_x86_feature_detected!("avx512f")
                    && std::arch::is_x86_feature_detected!("avx512dq")
                    && std::arch::is_x86_feature_detected!("avx512vl")
                {
                    Some("SKYLAKEX")
                } else if std::arch::is_x86_feature_detected!("avx2")
                    && std::arch::is_x86_feature_detected!("fma")
                {
                    Some("HASWELL")
                } else {
                    None
                };
                if let Some(core) = core {
                    set_env("OPENBLAS_CORETYPE", core);
                }
            }
        }
        // One BLAS thread per product: parallelism happens across runs, and a
        // fixed thread count keeps results reproducible.
        if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
            set_env("OPENBLAS_NUM_THREADS", "1");
        }
    }

    fn set_env(key: &str, value: &str) {
        let k = CString::new(key).unwrap();
        let v = CString::new(value).unwrap();
        unsafe {
            libc::setenv(k.as_ptr(), v.as_ptr(), 1);
        }
    }

    fn load() -> Option<Blas> {
        if std::env::var_os("XTAB_NO_BLAS").is_some() {
            return None;
        }
        preset_environment();
        let lib = ["libopenblas.so.0", "libopenblas.so", "libopenblas.so.3"]
            .iter()
            .find_map(|name| {
                let cname = CString::new(*name).unwrap();
                let h = unsafe { libc::dlopen(cname.as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL) };
                (!h.is_null()).then_some(h)
            })?;

        let dgemm = sym(lib, "cblas_dgemm")?;
        let sgemm = sym(lib, "cblas_sgemm")?;
        let blas = Blas {
            dgemm: unsafe { std::mem::transmute::<*mut c_void, DgemmFn>(dgemm) },
            sgemm: unsafe { std::mem::transmute::<*mut c_void, SgemmFn>(sgemm) },
            corename: sym(lib, "openblas_get_corename")
                .map(|p| unsafe { std::mem::transmute::<*mut c_void, CorenameFn>(p) }),
        };
        if let Some(p) = sym(lib, "openblas_set_num_threads") {
            let set: unsafe extern "C" fn(c_int) = unsafe { std::mem::transmute(p) };
            unsafe { set(1) };
        }
        log::debug!("loaded BLAS backend: {}", blas.corename());
        Some(blas)
    }

    fn sym(lib: *mut c_void, name: &str) -> Option<*mut c_void> {
        let cname = CString::new(name).unwrap();
        let p = unsafe { libc::dlsym(lib, cname.as_ptr()) };
        (!p.is_null()).then_some(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn naive(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
        let (m, k) = a.dim();
        let n = b.ncols();
        let mut c = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[[i, l]] * b[[l, j]];
                }
                c[[i, j]] = s;
            }
        }
        c
    }

    #[test]
    fn small_products_match_naive_exactly_in_structure() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let c = matmul(a.view(), b.view());
        assert_eq!(c, array![[58.0, 64.0], [139.0, 154.0]]);
        let c2 = matmul_nt(a.view(), b.t().to_owned().view());
        assert_eq!(c2, c);
        let c3 = matmul_tn(a.t().to_owned().view(), b.view());
        assert_eq!(c3, c);
    }

    #[test]
    fn random_products_agree_with_naive() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(7, 0);
        for &(m, k, n) in &[(5usize, 9usize, 4usize), (17, 3, 11), (1, 8, 1), (13, 13, 13)] {
            let a = Array2::from_shape_fn((m, k), |_| rng.random_range(-1.0..1.0));
            let b = Array2::from_shape_fn((k, n), |_| rng.random_range(-1.0..1.0));
            let c = matmul(a.view(), b.view());
            let r = naive(a.view(), b.view());
            for (x, y) in c.iter().zip(r.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn large_product_close_despite_reduced_precision() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(11, 0);
        // 260^3 > F32 threshold? 17.5M > 16.7M: exercises the staged path.
        let n = 260;
        let a = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let c = matmul(a.view(), b.view());
        let r = naive(a.view(), b.view());
        for (x, y) in c.iter().zip(r.iter()) {
            assert!((x - y).abs() < 1e-2, "{x} vs {y}");
        }
    }
}
