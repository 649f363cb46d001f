//! The bundled seed toolbox: manifests, bindings and curated test suites.

use crate::runtime::{ToolBinding, ToolRegistry};
use crate::schema::validate_manifest;
use crate::store::{Batch, Store, StoreError};

macro_rules! seed_tools {
    ($($name:literal),* $(,)?) => {
        &[$((
            $name,
            include_str!(concat!("../seed/tools/", $name, ".json")),
            include_str!(concat!("../seed/bindings/", $name, ".json")),
            include_str!(concat!("../seed/tests/", $name, ".json")),
        )),*]
    };
}

/// (name, manifest, binding, test suite)
static SEED: &[(&str, &str, &str, &str)] = seed_tools![
    "calculator",
    "unit_converter",
    "date_calculator",
    "string_transformer",
    "maze_solver",
    "http_fetch",
    "wiki_lookup",
    "dictionary_lookup",
    "exchange_rate",
    "weather_lookup",
    "geocode",
    "summarizer",
    "solution_generator",
];

pub fn tool_names() -> impl Iterator<Item = &'static str> {
    SEED.iter().map(|(n, ..)| *n)
}

pub fn manifest(name: &str) -> Option<&'static str> {
    SEED.iter().find(|(n, ..)| *n == name).map(|(_, m, ..)| *m)
}

pub fn binding(name: &str) -> Option<&'static str> {
    SEED.iter()
        .find(|(n, ..)| *n == name)
        .map(|(_, _, b, _)| *b)
}

pub fn tests(name: &str) -> Option<&'static str> {
    SEED.iter().find(|(n, ..)| *n == name).map(|(.., t)| *t)
}

/// Every seed file as (relative path, contents).
pub fn files() -> Vec<(String, &'static str)> {
    let mut out = Vec::new();
    for (name, m, b, t) in SEED {
        out.push((format!("tools/{name}.json"), *m));
        out.push((format!("bindings/{name}.json"), *b));
        out.push((format!("tests/{name}.json"), *t));
    }
    out
}

/// A fresh registry holding every seed tool.
pub fn registry() -> ToolRegistry {
    let registry = ToolRegistry::new();
    for (name, manifest, binding, _) in SEED {
        let descriptor = validate_manifest(manifest.as_bytes())
            .unwrap_or_else(|e| panic!("seed manifest {name}: {e:?}"));
        let binding: ToolBinding =
            serde_json::from_str(binding).unwrap_or_else(|e| panic!("seed binding {name}: {e}"));
        registry
            .register(descriptor, binding)
            .unwrap_or_else(|e| panic!("seed tool {name}: {e}"));
    }
    registry
}

/// Writes the seed toolbox into the store in one commit.
pub fn install(store: &Store) -> Result<(), StoreError> {
    let mut batch = Batch::new();
    for (path, contents) in files() {
        batch.write(path, contents);
    }
    store.commit(&batch)
}
