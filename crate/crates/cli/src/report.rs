use gpic_core::Error;
use serde_json::json;

fn kind(e: &anyhow::Error) -> &'static str {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::ShapeMismatch { .. } | Error::InvalidShape { .. }) => "shape",
        Some(Error::InvalidArgument(_)) => "invalid_argument",
        Some(Error::NonFinite(_)) => "non_finite",
        Some(Error::Format { .. }) => "format",
        Some(Error::Config { .. }) => "config",
        Some(Error::Io { .. }) => "io",
        None => "error",
    }
}

/// One JSON object on one line: `{"error":{"kind":..,"message":..}}`.
pub fn error_line(e: &anyhow::Error) -> String {
    let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ").replace('\n', " ");
    json!({ "error": { "kind": kind(e), "message": message } }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_lines_are_single_line_json() {
        let e = anyhow::Error::new(Error::Config { line: 3, message: "unknown key \"x\"".into() }).context("reading a.cfg");
        let line = error_line(&e);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["kind"], "config");
        assert_eq!(v["error"]["message"], "reading a.cfg: config line 3: unknown key \"x\"");
        assert_eq!(kind(&anyhow::anyhow!("plain")), "error");
    }
}
