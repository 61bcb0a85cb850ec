use std::path::Path;

use super::{io_err, CliError};

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::InvalidFlags(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() {
            return Err(CliError::InvalidFlags(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<&str> {
    let mut found = None;
    for (k, a) in args.iter().enumerate() {
        if a == "--config" {
            found = args.get(k + 1).map(String::as_str);
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(p);
        }
    }
    found
}

/// Inserts the entries of the `--config` file right after the subcommand so
/// that explicit flags, parsed later, override them.
pub fn expand_config(argv: &[String]) -> Result<Vec<String>, CliError> {
    if argv.len() < 2 {
        return Ok(argv.to_vec());
    }
    let Some(path) = config_path(&argv[2..]) else { return Ok(argv.to_vec()) };
    let path = Path::new(path);
    let text = std::fs::read_to_string(path)
        .map_err(io_err(path))
        .map_err(|e| CliError::InvalidFlags(format!("--config: {e}")))?;
    let mut out = argv[..2].to_vec();
    out.extend(parse_config(&text)?.into_iter().map(|(k, v)| format!("--{k}={v}")));
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}
