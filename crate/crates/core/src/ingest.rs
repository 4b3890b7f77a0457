//! Ingestion of RICO-style view hierarchies.
//!
//! The document root (or `activity.root`) is the screen itself and is not
//! emitted; its visible descendants become objects in pre-order. Pixel
//! bounds are normalized by the root bounds and clamped into the unit
//! square.
//!
//! Class names map to object types by their last dotted segment:
//!
//! | class (suffix match)                                  | type       |
//! |-------------------------------------------------------|------------|
//! | `EditText`, `AutoCompleteTextView`, `SearchView`      | input      |
//! | `CheckBox`, `CheckedTextView`, `RadioButton`          | checkbox   |
//! | `Switch`, `SwitchCompat`, `ToggleButton`              | toggle     |
//! | `ImageButton`, `FloatingActionButton`                 | icon       |
//! | `Button`, `AppCompatButton`, `MaterialButton`         | button     |
//! | `ImageView`, `AppCompatImageView`                     | image      |
//! | `TabView`, `TabWidget`, `*Tab`                        | tab        |
//! | `TextView`, `AppCompatTextView`                       | text       |
//! | direct child of `ListView` / `RecyclerView`           | list_item  |
//! | anything else                                         | other      |
//!
//! Checks run in table order, so `ImageButton` is an icon, not a button.

use serde_json::Value;
use thiserror::Error;

use crate::screen::{BBox, ObjType, Screen, UiObject};
use crate::vocab::{split_identifier, tokenize};

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("unparseable document: {0}")]
    Parse(String),
    #[error("document has no root node")]
    NoRoot,
    #[error("root node has no bounds")]
    MissingRootBounds,
    #[error("root bounds have zero area: {0:?}")]
    ZeroAreaRoot([f64; 4]),
    #[error("node {path} has malformed bounds")]
    BadBounds { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub screen: Screen,
    /// Human-readable notes about clamped or dropped nodes.
    pub warnings: Vec<String>,
}

/// Maps an Android class name to an object type. `in_list` is true for
/// direct children of list containers.
pub fn map_class(class: &str, in_list: bool) -> ObjType {
    let last = class.rsplit(['.', '$']).next().unwrap_or(class);
    let any = |names: &[&str]| names.contains(&last);
    if any(&["EditText", "AppCompatEditText", "TextInputEditText", "AutoCompleteTextView", "SearchView"]) {
        ObjType::Input
    } else if any(&["CheckBox", "AppCompatCheckBox", "CheckedTextView", "RadioButton", "AppCompatRadioButton"]) {
        ObjType::Checkbox
    } else if any(&["Switch", "SwitchCompat", "SwitchMaterial", "ToggleButton"]) {
        ObjType::Toggle
    } else if any(&["ImageButton", "AppCompatImageButton", "FloatingActionButton"]) {
        ObjType::Icon
    } else if any(&["Button", "AppCompatButton", "MaterialButton"]) {
        ObjType::Button
    } else if any(&["ImageView", "AppCompatImageView"]) {
        ObjType::Image
    } else if any(&["TabView", "TabWidget"]) || last.ends_with("Tab") {
        ObjType::Tab
    } else if any(&["TextView", "AppCompatTextView", "MaterialTextView"]) {
        ObjType::Text
    } else if in_list {
        ObjType::ListItem
    } else {
        ObjType::Other
    }
}

fn is_list(class: &str) -> bool {
    let last = class.rsplit(['.', '$']).next().unwrap_or(class);
    matches!(last, "ListView" | "RecyclerView" | "GridView")
}

fn bounds(node: &Value) -> Option<Option<[f64; 4]>> {
    let b = node.get("bounds")?;
    let arr = b.as_array().filter(|a| a.len() == 4);
    Some(arr.and_then(|a| {
        let v: Vec<f64> = a.iter().filter_map(Value::as_f64).collect();
        (v.len() == 4).then(|| [v[0], v[1], v[2], v[3]])
    }))
}

fn visible(node: &Value) -> bool {
    let flag = node.get("visible-to-user").or_else(|| node.get("visible_to_user")).and_then(Value::as_bool);
    let vis = node.get("visibility").and_then(Value::as_str);
    flag != Some(false) && vis.is_none_or(|v| v == "visible")
}

struct Walk {
    root: [f64; 4],
    objects: Vec<UiObject>,
    parent: Vec<Option<usize>>,
    warnings: Vec<String>,
}

impl Walk {
    fn node(&mut self, node: &Value, path: String, parent: Option<usize>, in_list: bool) -> Result<(), IngestError> {
        if !visible(node) {
            return Ok(());
        }
        let class = node.get("class").and_then(Value::as_str).unwrap_or("");
        let raw = match bounds(node) {
            None => {
                self.warnings.push(format!("{path}: no bounds, subtree skipped"));
                return Ok(());
            }
            Some(None) => return Err(IngestError::BadBounds { path }),
            Some(Some(b)) => b,
        };
        let [rx0, ry0, rx1, ry1] = self.root;
        let (w, h) = (rx1 - rx0, ry1 - ry0);
        let norm = [(raw[0] - rx0) / w, (raw[1] - ry0) / h, (raw[2] - rx0) / w, (raw[3] - ry0) / h];
        let clamped = norm.map(|v| v.clamp(0.0, 1.0));
        if clamped != norm {
            self.warnings.push(format!("{path}: bounds {raw:?} exceed the root and were clamped"));
        }
        let bbox = BBox::new(clamped[0], clamped[1], clamped[2], clamped[3]);
        let here = if bbox.is_proper() {
            let index = self.objects.len();
            let text = node.get("text").and_then(Value::as_str).map(tokenize).unwrap_or_default();
            let rid = node
                .get("resource-id")
                .or_else(|| node.get("resource_id"))
                .and_then(Value::as_str)
                .map(split_identifier)
                .unwrap_or_default();
            self.objects.push(UiObject {
                index,
                bbox,
                obj_type: map_class(class, in_list),
                clickable: node.get("clickable").and_then(Value::as_bool).unwrap_or(false),
                leaf: true,
                text,
                resource_id: rid,
                dom_pre: index,
                dom_post: 0,
            });
            self.parent.push(parent);
            if let Some(p) = parent {
                self.objects[p].leaf = false;
            }
            Some(index)
        } else {
            self.warnings.push(format!("{path}: empty box after clamping, node dropped"));
            parent
        };
        let list = is_list(class);
        if let Some(children) = node.get("children").and_then(Value::as_array) {
            for (i, c) in children.iter().enumerate() {
                self.node(c, format!("{path}/{i}"), here, list)?;
            }
        }
        Ok(())
    }
}

/// Parses a view-hierarchy JSON text. `screen_id` names the result; the app
/// id is the package of `activity_name` when present.
pub fn ingest_str(text: &str, screen_id: &str) -> Result<Ingested, IngestError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| IngestError::Parse(e.to_string()))?;
    ingest_view_hierarchy(&doc, screen_id)
}

pub fn ingest_view_hierarchy(doc: &Value, screen_id: &str) -> Result<Ingested, IngestError> {
    let root = doc.pointer("/activity/root").or_else(|| doc.get("root")).unwrap_or(doc);
    if !root.is_object() {
        return Err(IngestError::NoRoot);
    }
    let rb = match bounds(root) {
        None => return Err(IngestError::MissingRootBounds),
        Some(None) => return Err(IngestError::BadBounds { path: "root".into() }),
        Some(Some(b)) => b,
    };
    if !(rb[2] > rb[0] && rb[3] > rb[1]) {
        return Err(IngestError::ZeroAreaRoot(rb));
    }
    let app_id = doc
        .get("activity_name")
        .and_then(Value::as_str)
        .map(|a| a.split('/').next().unwrap_or(a).to_owned())
        .unwrap_or_else(|| "unknown".into());
    let mut walk = Walk { root: rb, objects: Vec::new(), parent: Vec::new(), warnings: Vec::new() };
    if let Some(children) = root.get("children").and_then(Value::as_array) {
        let list = is_list(root.get("class").and_then(Value::as_str).unwrap_or(""));
        for (i, c) in children.iter().enumerate() {
            walk.node(c, format!("root/{i}"), None, list)?;
        }
    }
    let Walk { mut objects, parent, warnings, .. } = walk;
    assign_post_order(&mut objects, &parent);
    Ok(Ingested {
        screen: Screen {
            screen_id: screen_id.to_owned(),
            app_id,
            width_px: (rb[2] - rb[0]).round() as u32,
            height_px: (rb[3] - rb[1]).round() as u32,
            objects,
        },
        warnings,
    })
}

fn assign_post_order(objects: &mut [UiObject], parent: &[Option<usize>]) {
    let n = objects.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut roots = Vec::new();
    for (i, p) in parent.iter().enumerate() {
        match p {
            Some(p) => children[*p].push(i),
            None => roots.push(i),
        }
    }
    // Iterative post-order; pre-order indices increase along children lists.
    let mut counter = 0;
    let mut stack: Vec<(usize, bool)> = roots.into_iter().rev().map(|r| (r, false)).collect();
    while let Some((i, expanded)) = stack.pop() {
        if expanded {
            objects[i].dom_post = counter;
            counter += 1;
        } else {
            stack.push((i, true));
            for &c in children[i].iter().rev() {
                stack.push((c, false));
            }
        }
    }
}
