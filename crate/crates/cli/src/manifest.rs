//! Run manifests: flat `key=value` text recording everything needed to replay
//! a command. Values are JSON literals, so strings are quoted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Resolved settings, one entry per field.
    pub settings: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new<S: Serialize>(command: &str, settings: &S) -> Result<Self> {
        let Value::Object(map) = serde_json::to_value(settings)? else {
            bail!("settings must serialize to a flat object");
        };
        Ok(Self {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            settings: map.into_iter().collect(),
        })
    }

    pub fn settings<S: DeserializeOwned>(&self) -> Result<S> {
        let map: Map<String, Value> = self.settings.clone().into_iter().collect();
        serde_json::from_value(Value::Object(map))
            .context("manifest settings do not match the command")
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "command={}\ntool_version={}\n",
            self.command, self.tool_version
        );
        for (k, v) in &self.settings {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut command = None;
        let mut tool_version = None;
        let mut settings = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("manifest line {} has no `=`", lineno + 1))?;
            match key {
                "command" => command = Some(value.to_string()),
                "tool_version" => tool_version = Some(value.to_string()),
                _ => {
                    let v: Value = serde_json::from_str(value).with_context(|| {
                        format!("manifest line {}: bad value for `{key}`", lineno + 1)
                    })?;
                    settings.insert(key.to_string(), v);
                }
            }
        }
        Ok(Self {
            command: command.ok_or_else(|| anyhow!("manifest has no `command`"))?,
            tool_version: tool_version.unwrap_or_default(),
            settings,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())
            .with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        path: String,
        size: usize,
        rate: f64,
        switch: Option<usize>,
        flag: bool,
    }

    #[test]
    fn render_parse_round_trip() {
        let demo = Demo {
            path: "a b=c.vsef".into(),
            size: 3,
            rate: 0.0002,
            switch: None,
            flag: true,
        };
        let m = RunManifest::new("demo", &demo).unwrap();
        let text = m.render();
        assert!(text.starts_with("command=demo\n"));
        assert!(text.contains("rate=0.0002\n"));
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.settings::<Demo>().unwrap(), demo);
    }
}
