#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fermiten/common.hpp"

namespace ftn {

enum class GroupKind { Z2, U1, U1U1 };

inline std::string group_kind_name(GroupKind k) {
    switch (k) {
    case GroupKind::Z2: return "Z2";
    case GroupKind::U1: return "U1";
    case GroupKind::U1U1: return "U1U1";
    }
    return "?";
}

// Abelian irrep label: one integer component for Z2/U1, two for U1U1.
// Unused components are kept at zero so lexicographic comparison is uniform.
class Charge {
public:
    Charge() : c_{0, 0} {}
    explicit Charge(int a) : c_{a, 0} {}
    Charge(int a, int b) : c_{a, b} {}

    int operator[](int i) const { return c_[static_cast<size_t>(i)]; }
    int &operator[](int i) { return c_[static_cast<size_t>(i)]; }

    friend bool operator==(const Charge &x, const Charge &y) { return x.c_ == y.c_; }
    friend bool operator!=(const Charge &x, const Charge &y) { return x.c_ != y.c_; }
    friend bool operator<(const Charge &x, const Charge &y) { return x.c_ < y.c_; }

    std::string to_string() const {
        return "(" + std::to_string(c_[0]) + "," + std::to_string(c_[1]) + ")";
    }

private:
    std::array<int, 2> c_;
};

enum class Sign : int8_t { Plus = +1, Minus = -1 };

inline Sign flip(Sign s) { return s == Sign::Plus ? Sign::Minus : Sign::Plus; }
inline char sign_char(Sign s) { return s == Sign::Plus ? '+' : '-'; }

class SymmetryGroup {
public:
    SymmetryGroup() : kind_(GroupKind::U1) {}
    explicit SymmetryGroup(GroupKind k) : kind_(k) {}

    GroupKind kind() const { return kind_; }
    int ncomp() const { return kind_ == GroupKind::U1U1 ? 2 : 1; }
    Charge identity() const { return Charge(); }

    bool valid(const Charge &c) const {
        if (kind_ == GroupKind::Z2)
            return (c[0] == 0 || c[0] == 1) && c[1] == 0;
        if (kind_ == GroupKind::U1)
            return c[1] == 0;
        return true;
    }

    void check(const Charge &c) const {
        if (!valid(c))
            throw std::invalid_argument("charge " + c.to_string() + " invalid for group " +
                                        group_kind_name(kind_));
    }

    Charge add(const Charge &a, const Charge &b) const {
        if (kind_ == GroupKind::Z2)
            return Charge((a[0] + b[0]) & 1);
        if (kind_ == GroupKind::U1)
            return Charge(a[0] + b[0]);
        return Charge(a[0] + b[0], a[1] + b[1]);
    }

    Charge neg(const Charge &a) const {
        if (kind_ == GroupKind::Z2)
            return Charge(a[0] & 1);
        if (kind_ == GroupKind::U1)
            return Charge(-a[0]);
        return Charge(-a[0], -a[1]);
    }

    Charge sub(const Charge &a, const Charge &b) const { return add(a, neg(b)); }

    // Z2 grade of an irrep; drives every fermionic sign rule.
    int parity(const Charge &c) const {
        if (kind_ == GroupKind::U1U1)
            return ((c[0] + c[1]) % 2 + 2) % 2;
        return (c[0] % 2 + 2) % 2;
    }

    friend bool operator==(const SymmetryGroup &a, const SymmetryGroup &b) {
        return a.kind_ == b.kind_;
    }
    friend bool operator!=(const SymmetryGroup &a, const SymmetryGroup &b) {
        return a.kind_ != b.kind_;
    }

private:
    GroupKind kind_;
};

// Signed sum of charges under the group arithmetic.
inline Charge fuse_charges(const SymmetryGroup &g, std::span<const Charge> charges,
                           std::span<const Sign> signs) {
    if (charges.empty() || charges.size() != signs.size())
        throw std::invalid_argument("fuse_charges: need equal nonzero numbers of charges and signs");
    Charge acc = g.identity();
    for (size_t i = 0; i < charges.size(); ++i) {
        g.check(charges[i]);
        acc = signs[i] == Sign::Plus ? g.add(acc, charges[i]) : g.sub(acc, charges[i]);
    }
    return acc;
}

inline Charge fuse_charges(const SymmetryGroup &g, std::initializer_list<Charge> charges,
                           std::initializer_list<Sign> signs) {
    return fuse_charges(g, std::span<const Charge>(charges.begin(), charges.size()),
                        std::span<const Sign>(signs.begin(), signs.size()));
}

inline int parity_of(const SymmetryGroup &g, const Charge &c) {
    g.check(c);
    return g.parity(c);
}

struct Sector {
    Charge charge;
    int64_t dim = 0;

    friend bool operator==(const Sector &a, const Sector &b) {
        return a.charge == b.charge && a.dim == b.dim;
    }
};

// A tensor leg: charge sectors, a signature sign, and an opaque bond id.
// Sectors are kept sorted by charge so block enumeration is deterministic.
class Index {
public:
    Index() = default;
    Index(std::vector<Sector> sectors, Sign sign, std::string id)
        : sectors_(std::move(sectors)), sign_(sign), id_(std::move(id)) {
        std::sort(sectors_.begin(), sectors_.end(),
                  [](const Sector &a, const Sector &b) { return a.charge < b.charge; });
        for (size_t i = 0; i < sectors_.size(); ++i) {
            if (sectors_[i].dim < 1)
                throw std::invalid_argument("Index: sector dimension must be >= 1");
            if (i > 0 && !(sectors_[i - 1].charge < sectors_[i].charge))
                throw std::invalid_argument("Index: duplicate sector charge");
        }
    }

    const std::vector<Sector> &sectors() const { return sectors_; }
    int nsectors() const { return static_cast<int>(sectors_.size()); }
    Sign sign() const { return sign_; }
    const std::string &id() const { return id_; }

    int64_t dim() const {
        int64_t d = 0;
        for (const auto &s : sectors_) d += s.dim;
        return d;
    }

    // dense offset of a sector in the charge-sorted layout
    int64_t sector_offset(int ord) const {
        int64_t off = 0;
        for (int i = 0; i < ord; ++i) off += sectors_[static_cast<size_t>(i)].dim;
        return off;
    }

    int find_sector(const Charge &c) const {
        for (size_t i = 0; i < sectors_.size(); ++i)
            if (sectors_[i].charge == c) return static_cast<int>(i);
        return -1;
    }

    Index dual() const {
        Index d = *this;
        d.sign_ = flip(sign_);
        return d;
    }

    Index with_id(std::string id) const {
        Index d = *this;
        d.id_ = std::move(id);
        return d;
    }

    Index with_sign(Sign s) const {
        Index d = *this;
        d.sign_ = s;
        return d;
    }

    bool same_sectors(const Index &o) const { return sectors_ == o.sectors_; }

    friend bool operator==(const Index &a, const Index &b) {
        return a.sectors_ == b.sectors_ && a.sign_ == b.sign_ && a.id_ == b.id_;
    }

private:
    std::vector<Sector> sectors_;
    Sign sign_ = Sign::Plus;
    std::string id_;
};

// Process-wide generator for fresh bond ids. Deterministic within a run.
std::string fresh_bond_id();

} // namespace ftn
