//! JSON and CSV output of experiment reports. Output depends only on the report
//! contents, so reruns with any worker count give identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::ansatz::AnsatzResiduals;
use super::ConvergenceReport;
use crate::error::{Error, Result};

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_text(&to_json(value)?, path)
}

/// `eps,u_sup,m_L1` rows.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut s = String::from("eps,u_sup,m_L1\n");
    for e in &report.errors {
        let _ = writeln!(s, "{},{},{}", e.eps, e.u_sup, e.m_l1);
    }
    s
}

/// `eps,hjb_residual_sup,fp_residual_L1,fredholm_defect` rows.
pub fn ansatz_csv(rows: &[AnsatzResiduals]) -> String {
    let mut s = String::from("eps,hjb_residual_sup,fp_residual_L1,fredholm_defect\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.eps, r.hjb_residual_sup, r.fp_residual_l1, r.fredholm_defect);
    }
    s
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
