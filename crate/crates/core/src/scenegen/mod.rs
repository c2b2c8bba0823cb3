//! Synthetic multi-object scenes on a 3×3 grid, paired before/after renders,
//! and templated add/remove/modify instructions.

mod dataset;
mod grammar;
mod raster;

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{build_dataset, generate_samples, load_split, DatasetConfig, EditSample, SampleRecord, Split};
pub use grammar::{vocabulary_words, POSITION_COLS, POSITION_ROWS};
pub use raster::{cell_bounds, render_scene, BACKGROUND};

pub const GRID: usize = 3;
pub const MAX_OBJECTS: usize = GRID * GRID;

/// An RGB image, `[3, height, width]`, values in `[0, 1]`.
pub type Image = ndarray::Array3<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Gray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Gray];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 200, 30],
            Color::Gray => [90, 90, 90],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// Position on the layout grid; row 0 is the top, column 0 the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    row: u8,
    col: u8,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Result<Self> {
        if row >= GRID || col >= GRID {
            return Err(Error::InvalidScene(format!("cell ({row}, {col}) is off the {GRID}x{GRID} grid")));
        }
        Ok(Cell {
            row: row as u8,
            col: col as u8,
        })
    }

    pub fn row(self) -> usize {
        self.row as usize
    }

    pub fn col(self) -> usize {
        self.col as usize
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..GRID).flat_map(|r| (0..GRID).map(move |c| Cell { row: r as u8, col: c as u8 }))
    }

    /// Two-word position phrase, e.g. "top left".
    pub fn position(self) -> String {
        format!("{} {}", POSITION_ROWS[self.row()], POSITION_COLS[self.col()])
    }
}

/// What an object looks like, independent of where it is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub size: Size,
    pub color: Color,
    pub shape: ShapeKind,
}

impl Attributes {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Attributes {
            size: *Size::ALL.choose(rng).expect("non-empty"),
            color: *Color::ALL.choose(rng).expect("non-empty"),
            shape: *ShapeKind::ALL.choose(rng).expect("non-empty"),
        }
    }

    pub fn phrase(&self) -> String {
        format!("{} {} {}", self.size.word(), self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub attributes: Attributes,
    pub cell: Cell,
}

/// A set of objects in distinct cells on a square canvas.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    objects: Vec<SceneObject>,
    canvas: usize,
}

pub const DEFAULT_CANVAS: usize = 64;

impl SceneDescription {
    pub fn new(objects: Vec<SceneObject>, canvas: usize) -> Result<Self> {
        if canvas < 2 * GRID {
            return Err(Error::InvalidScene(format!("canvas {canvas} is too small")));
        }
        if objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidScene(format!("{} objects exceed {MAX_OBJECTS}", objects.len())));
        }
        for (i, a) in objects.iter().enumerate() {
            if objects[..i].iter().any(|b| b.cell == a.cell) {
                return Err(Error::InvalidScene(format!("two objects share cell {}", a.cell.position())));
            }
        }
        let mut objects = objects;
        objects.sort_by_key(|o| o.cell);
        Ok(SceneDescription { objects, canvas })
    }

    pub fn empty(canvas: usize) -> Result<Self> {
        Self::new(Vec::new(), canvas)
    }

    /// Between `min_objects` and `max_objects` objects in random cells.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, canvas: usize, min_objects: usize, max_objects: usize) -> Result<Self> {
        let max_objects = max_objects.min(MAX_OBJECTS);
        if min_objects > max_objects {
            return Err(Error::InvalidScene(format!("object range {min_objects}..={max_objects} is empty")));
        }
        let count = rng.random_range(min_objects..=max_objects);
        let mut cells: Vec<Cell> = Cell::all().collect();
        cells.shuffle(rng);
        let objects = cells[..count]
            .iter()
            .map(|&cell| SceneObject {
                attributes: Attributes::random(rng),
                cell,
            })
            .collect();
        Self::new(objects, canvas)
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    pub fn object_at(&self, cell: Cell) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        Cell::all().filter(|&c| self.object_at(c).is_none()).collect()
    }

    pub fn is_full(&self) -> bool {
        self.objects.len() == MAX_OBJECTS
    }

    /// The scene after `instruction`, or an error if it does not apply.
    pub fn apply(&self, instruction: &Instruction) -> Result<SceneDescription> {
        let mut objects = self.objects.clone();
        match *instruction {
            Instruction::Add { cell, attributes } => {
                if self.object_at(cell).is_some() {
                    return Err(Error::InvalidScene(format!("{} is already occupied", cell.position())));
                }
                objects.push(SceneObject { attributes, cell });
            }
            Instruction::Remove { cell } => {
                let before = objects.len();
                objects.retain(|o| o.cell != cell);
                if objects.len() == before {
                    return Err(Error::EmptyScene("remove"));
                }
            }
            Instruction::Modify { cell, attributes } => {
                let obj = objects
                    .iter_mut()
                    .find(|o| o.cell == cell)
                    .ok_or(Error::EmptyScene("modify"))?;
                if obj.attributes == attributes {
                    return Err(Error::InvalidScene("modification changes nothing".into()));
                }
                obj.attributes = attributes;
            }
        }
        SceneDescription::new(objects, self.canvas)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Add,
    Remove,
    Modify,
}

impl EditOp {
    pub const ALL: [EditOp; 3] = [EditOp::Add, EditOp::Remove, EditOp::Modify];

    pub fn as_str(self) -> &'static str {
        match self {
            EditOp::Add => "add",
            EditOp::Remove => "remove",
            EditOp::Modify => "modify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EditOp::ALL.into_iter().find(|op| op.as_str() == s)
    }

    /// Whether this op can apply to `scene` at all.
    pub fn is_legal(self, scene: &SceneDescription) -> bool {
        match self {
            EditOp::Add => !scene.is_full(),
            EditOp::Remove | EditOp::Modify => !scene.objects().is_empty(),
        }
    }
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single edit. Its text form is produced and parsed by the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    Add { cell: Cell, attributes: Attributes },
    Remove { cell: Cell },
    Modify { cell: Cell, attributes: Attributes },
}

impl Instruction {
    pub fn op(&self) -> EditOp {
        match self {
            Instruction::Add { .. } => EditOp::Add,
            Instruction::Remove { .. } => EditOp::Remove,
            Instruction::Modify { .. } => EditOp::Modify,
        }
    }

    pub fn target_cell(&self) -> Cell {
        match *self {
            Instruction::Add { cell, .. } | Instruction::Remove { cell } | Instruction::Modify { cell, .. } => cell,
        }
    }

    pub fn attributes(&self) -> Option<Attributes> {
        match *self {
            Instruction::Add { attributes, .. } | Instruction::Modify { attributes, .. } => Some(attributes),
            Instruction::Remove { .. } => None,
        }
    }

    pub fn text(&self) -> String {
        grammar::render(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        grammar::parse(text)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Draws an op uniformly among those legal for `scene`, then an edit of that op.
pub fn sample_edit<R: Rng + ?Sized>(scene: &SceneDescription, rng: &mut R) -> Result<(Instruction, SceneDescription)> {
    let legal: Vec<EditOp> = EditOp::ALL.into_iter().filter(|op| op.is_legal(scene)).collect();
    let op = *legal.choose(rng).ok_or(Error::EmptyScene("edit"))?;
    sample_edit_op(scene, op, rng)
}

/// A random edit of a fixed op. Fails when `op` cannot apply to `scene`.
pub fn sample_edit_op<R: Rng + ?Sized>(
    scene: &SceneDescription,
    op: EditOp,
    rng: &mut R,
) -> Result<(Instruction, SceneDescription)> {
    let instruction = match op {
        EditOp::Add => {
            let free = scene.free_cells();
            let cell = *free.choose(rng).ok_or(Error::GridFull)?;
            Instruction::Add {
                cell,
                attributes: Attributes::random(rng),
            }
        }
        EditOp::Remove => {
            let obj = scene.objects().choose(rng).ok_or(Error::EmptyScene("remove"))?;
            Instruction::Remove { cell: obj.cell }
        }
        EditOp::Modify => {
            let obj = scene.objects().choose(rng).ok_or(Error::EmptyScene("modify"))?;
            let attributes = loop {
                let a = Attributes::random(rng);
                if a != obj.attributes {
                    break a;
                }
            };
            Instruction::Modify {
                cell: obj.cell,
                attributes,
            }
        }
    };
    let edited = scene.apply(&instruction)?;
    Ok((instruction, edited))
}
