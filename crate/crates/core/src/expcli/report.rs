use std::path::Path;

use crate::artifact::{self, Header, PayloadReader, Version};
use crate::error::{Error, Result};

pub const REPORT_MAGIC: &str = "NORP1";
pub const REPORT_VERSION: Version = Version::new(1, 0);

/// Named CSV tables produced by one `report` invocation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportBundle {
    pub config_digest: String,
    pub tables: Vec<(String, String)>,
}

impl ReportBundle {
    pub fn table(&self, name: &str) -> Option<&str> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::default();
        h.push("config", &self.config_digest);
        for (name, text) in &self.tables {
            h.push("table", format!("{name}:{}", text.len()));
        }
        let payload: Vec<u8> = self.tables.iter().flat_map(|(_, t)| t.bytes()).collect();
        artifact::encode(REPORT_MAGIC, REPORT_VERSION, &h, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = artifact::decode(bytes, REPORT_MAGIC, REPORT_VERSION)?;
        let mut r = PayloadReader::new(&f.payload);
        let mut tables = Vec::new();
        for entry in f.header.all("table") {
            let (name, len) = entry
                .rsplit_once(':')
                .and_then(|(n, l)| Some((n, l.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::format(format!("bad table entry `{entry}`")))?;
            let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| Error::format("table is not UTF-8"))?;
            tables.push((name.to_string(), text.to_string()));
        }
        r.finish()?;
        Ok(Self {
            config_digest: f.header.require("config")?.to_string(),
            tables,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
