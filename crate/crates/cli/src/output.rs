use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use qemb::verify::{DistortionRecord, QripFit};

/// Column order of the per-record CSV.
pub const RECORD_HEADER: &str = "m,delta,mode,true_dist,est_dist,rel_err,pair_id,trial_id,seed";
/// Column order of the per-distance summary CSV.
pub const SUMMARY_HEADER: &str = "m,mode,eps_L_hat,dist,rho_hat_max,rho_hat_median";

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Shortest round-trip decimal, switching to exponent form for very small or
/// very large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

/// `# command` followed by one `# key=value` line per resolved setting.
pub fn header(command: &str, config: &[(&str, String)]) -> String {
    let mut out = format!("# qemb {command}\n");
    for (k, v) in config {
        let _ = writeln!(out, "# {k}={v}");
    }
    out
}

pub fn records_csv(preamble: &str, records: &[DistortionRecord]) -> String {
    let mut out = String::with_capacity(preamble.len() + 64 * (records.len() + 1));
    out.push_str(preamble);
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.m,
            num(r.delta),
            r.mode,
            num(r.true_dist),
            num(r.est_dist),
            num(r.rel_err),
            r.pair_id,
            r.trial_id,
            r.seed
        );
    }
    out
}

pub fn summary_csv(preamble: &str, fits: &[QripFit]) -> String {
    let mut out = String::from(preamble);
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for f in fits {
        for r in &f.rho {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                f.m,
                f.mode,
                num(f.eps_l_hat),
                num(r.dist),
                num(r.rho_max),
                num(r.rho_median)
            );
        }
    }
    out
}

/// Inserts `.k` before the extension: `codes.qemb` becomes `codes.3.qemb`.
pub fn indexed_path(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{k}"),
    };
    path.with_file_name(name)
}
