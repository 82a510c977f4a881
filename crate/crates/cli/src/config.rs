use std::path::Path;

use serde_json::Value;

/// Path given to `--config`, looked up before clap runs so that required
/// flags may come from the file.
pub fn config_path(argv: &[String]) -> Result<Option<String>, String> {
    let mut found = None;
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            match it.next() {
                Some(p) => found = Some(p.clone()),
                None => return Err("config: --config needs a path".into()),
            }
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(p.to_string());
        }
    }
    Ok(found)
}

/// Flag tokens equivalent to the keys of a JSON config object.
///
/// Scalars become `--key value`, `true` becomes a bare switch and `false` is
/// dropped, lists are joined with commas and nested objects are passed as
/// compact JSON. Underscores in keys map to hyphens.
pub fn config_tokens(path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("config: cannot read {}: {e}", path.display()))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| format!("config: {}: {e}", path.display()))?;
    let Value::Object(map) = doc else {
        return Err("config: top level must be a JSON object".into());
    };
    let mut out = Vec::new();
    for (key, v) in &map {
        if matches!(key.as_str(), "config" | "out" | "format") && !v.is_string() {
            return Err(format!("config field `{key}` must be a string"));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(scalar)
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| {
                        format!("config field `{key}` must hold only numbers or strings")
                    })?;
                out.push(flag);
                out.push(parts.join(","));
            }
            Value::Object(_) => {
                out.push(flag);
                out.push(v.to_string());
            }
            _ => {
                out.push(flag);
                out.push(scalar(v).expect("number or string"));
            }
        }
    }
    Ok(out)
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn finds_config_in_both_spellings() {
        assert_eq!(
            config_path(&argv("pptlab build --config a.json"))
                .unwrap()
                .as_deref(),
            Some("a.json")
        );
        assert_eq!(
            config_path(&argv("pptlab build --config=b.json"))
                .unwrap()
                .as_deref(),
            Some("b.json")
        );
        assert_eq!(config_path(&argv("pptlab build --N 3")).unwrap(), None);
        assert!(config_path(&argv("pptlab build --config")).is_err());
    }

    #[test]
    fn tokens_cover_each_value_kind() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            r#"{{"D": 3, "alpha": [0.5, 2], "fresh": true, "time_dependent": false, "sampling": {{"shots": 10, "seed": 1}}}}"#
        )
        .unwrap();
        let t = config_tokens(f.path()).unwrap();
        assert_eq!(
            t,
            vec![
                "--D",
                "3",
                "--alpha",
                "0.5,2",
                "--fresh",
                "--sampling",
                r#"{"seed":1,"shots":10}"#
            ]
        );
    }

    #[test]
    fn rejects_nested_lists_naming_the_field() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"alpha": [[1]]}}"#).unwrap();
        let e = config_tokens(f.path()).unwrap_err();
        assert!(e.contains("`alpha`"), "{e}");
    }
}
