use std::fmt;

/// Number of semantic classes, background included.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Car = 1,
    Pedestrian = 2,
    Cyclist = 3,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] =
        [Class::Background, Class::Car, Class::Pedestrian, Class::Cyclist];
    /// Classes that carry instances and get reported by evaluation.
    pub const OBJECTS: [Class; 3] = [Class::Car, Class::Pedestrian, Class::Cyclist];

    pub fn from_id(id: u8) -> Option<Class> {
        Class::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Car => "car",
            Class::Pedestrian => "pedestrian",
            Class::Cyclist => "cyclist",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
