#pragma once

#include <Eigen/Dense>
#include <complex>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fermiten/symmetry.hpp"

namespace ftn {

namespace detail {

template <class T> struct is_complex : std::false_type {};
template <class R> struct is_complex<std::complex<R>> : std::true_type {};

template <class T> double abs2(const T &x) {
    if constexpr (is_complex<T>::value)
        return std::norm(x);
    else
        return x * x;
}

template <class T> T conj_val(const T &x) {
    if constexpr (is_complex<T>::value)
        return std::conj(x);
    else
        return x;
}

inline std::vector<int64_t> row_major_strides(std::span<const int64_t> shape) {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
    return st;
}

// out[i0,i1,...] = in[i_{perm[0]}, ...]; perm maps new axis -> old axis.
template <class T>
std::vector<T> permute_dense(const std::vector<T> &in, std::span<const int64_t> shape,
                             std::span<const int> perm) {
    const int n = static_cast<int>(shape.size());
    std::vector<int64_t> out_shape(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out_shape[static_cast<size_t>(i)] = shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    auto in_strides = row_major_strides(shape);
    std::vector<int64_t> gather(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<T> out(in.size());
    if (in.empty()) return out;
    std::vector<int64_t> idx(static_cast<size_t>(n), 0);
    int64_t src = 0;
    for (size_t pos = 0; pos < out.size(); ++pos) {
        out[pos] = in[static_cast<size_t>(src)];
        for (int ax = n - 1; ax >= 0; --ax) {
            auto a = static_cast<size_t>(ax);
            if (++idx[a] < out_shape[a]) {
                src += gather[a];
                break;
            }
            src -= gather[a] * (out_shape[a] - 1);
            idx[a] = 0;
        }
    }
    return out;
}

} // namespace detail

// Abelian-symmetric block-sparse tensor. Blocks are dense row-major arrays
// keyed by one sector ordinal per leg; only keys satisfying the charge
// selection rule (signed sum of sector charges == total charge) may be stored.
template <class T> class BlockTensor {
public:
    using Key = std::vector<int>;
    using BlockMap = std::map<Key, std::vector<T>>;

    BlockTensor() = default;
    BlockTensor(SymmetryGroup group, std::vector<Index> indices, Charge total_charge)
        : group_(group), indices_(std::move(indices)), total_(total_charge) {
        group_.check(total_);
        for (const auto &ix : indices_)
            for (const auto &s : ix.sectors()) group_.check(s.charge);
    }

    const SymmetryGroup &group() const { return group_; }
    const std::vector<Index> &indices() const { return indices_; }
    const Index &index(int i) const { return indices_[static_cast<size_t>(i)]; }
    const Charge &total_charge() const { return total_; }
    int rank() const { return static_cast<int>(indices_.size()); }

    BlockMap &blocks() { return blocks_; }
    const BlockMap &blocks() const { return blocks_; }

    Charge key_charge(const Key &key) const {
        Charge acc = group_.identity();
        for (int i = 0; i < rank(); ++i) {
            const Charge &c = indices_[static_cast<size_t>(i)].sectors()[static_cast<size_t>(key[static_cast<size_t>(i)])].charge;
            acc = indices_[static_cast<size_t>(i)].sign() == Sign::Plus ? group_.add(acc, c) : group_.sub(acc, c);
        }
        return acc;
    }

    bool key_allowed(const Key &key) const { return key_charge(key) == total_; }

    std::vector<int64_t> block_shape(const Key &key) const {
        std::vector<int64_t> sh(static_cast<size_t>(rank()));
        for (int i = 0; i < rank(); ++i)
            sh[static_cast<size_t>(i)] = indices_[static_cast<size_t>(i)].sectors()[static_cast<size_t>(key[static_cast<size_t>(i)])].dim;
        return sh;
    }

    static int64_t shape_size(std::span<const int64_t> sh) {
        int64_t n = 1;
        for (int64_t d : sh) n *= d;
        return n;
    }

    std::vector<Key> allowed_keys() const {
        std::vector<Key> out;
        Key key(static_cast<size_t>(rank()), 0);
        if (rank() == 0) {
            if (total_ == group_.identity()) out.push_back(key);
            return out;
        }
        enumerate_keys(0, key, out);
        return out;
    }

    std::vector<T> &block(const Key &key) {
        auto it = blocks_.find(key);
        if (it != blocks_.end()) return it->second;
        if (!key_allowed(key))
            throw std::invalid_argument("BlockTensor: key violates the charge selection rule");
        auto sh = block_shape(key);
        return blocks_.emplace(key, std::vector<T>(static_cast<size_t>(shape_size(sh)), T{})).first->second;
    }

    const std::vector<T> *find_block(const Key &key) const {
        auto it = blocks_.find(key);
        return it == blocks_.end() ? nullptr : &it->second;
    }

    void set_block(const Key &key, std::vector<T> vals) {
        if (!key_allowed(key))
            throw std::invalid_argument("BlockTensor: key violates the charge selection rule");
        auto sh = block_shape(key);
        if (static_cast<int64_t>(vals.size()) != shape_size(sh))
            throw std::invalid_argument("BlockTensor: block value count does not match sector shape");
        blocks_[key] = std::move(vals);
    }

    double norm2() const {
        double n = 0;
        for (const auto &[k, v] : blocks_)
            for (const T &x : v) n += detail::abs2(x);
        return n;
    }

    double max_abs() const {
        double m = 0;
        for (const auto &[k, v] : blocks_)
            for (const T &x : v) m = std::max(m, std::abs(x));
        return m;
    }

    void scale(T factor) {
        for (auto &[k, v] : blocks_)
            for (T &x : v) x *= factor;
    }

    void conjugate_values() {
        for (auto &[k, v] : blocks_)
            for (T &x : v) x = detail::conj_val(x);
    }

    void prune_zeros() {
        for (auto it = blocks_.begin(); it != blocks_.end();) {
            bool all_zero = true;
            for (const T &x : it->second)
                if (x != T{}) { all_zero = false; break; }
            if (all_zero)
                it = blocks_.erase(it);
            else
                ++it;
        }
    }

    // scalar (rank-0) value
    T value() const {
        if (rank() != 0) throw std::invalid_argument("BlockTensor::value: tensor is not rank 0");
        auto it = blocks_.find(Key{});
        return it == blocks_.end() ? T{} : it->second[0];
    }

    void fill_random(Rng &rng) {
        for (const auto &key : allowed_keys()) {
            auto &b = block(key);
            for (T &x : b) {
                if constexpr (detail::is_complex<T>::value)
                    x = T(rng.normal(), rng.normal());
                else
                    x = rng.normal();
            }
        }
    }

    void rename_index(int pos, const std::string &id) {
        indices_[static_cast<size_t>(pos)] = indices_[static_cast<size_t>(pos)].with_id(id);
    }

    void set_index_sign(int pos, Sign s) {
        indices_[static_cast<size_t>(pos)] = indices_[static_cast<size_t>(pos)].with_sign(s);
    }

    void set_total_charge(const Charge &c) {
        group_.check(c);
        total_ = c;
    }

    int find_axis(const std::string &id) const {
        for (int i = 0; i < rank(); ++i)
            if (indices_[static_cast<size_t>(i)].id() == id) return i;
        return -1;
    }

private:
    void enumerate_keys(int leg, Key &key, std::vector<Key> &out) const {
        if (leg == rank()) {
            if (key_allowed(key)) out.push_back(key);
            return;
        }
        const int ns = indices_[static_cast<size_t>(leg)].nsectors();
        for (int s = 0; s < ns; ++s) {
            key[static_cast<size_t>(leg)] = s;
            enumerate_keys(leg + 1, key, out);
        }
    }

    SymmetryGroup group_;
    std::vector<Index> indices_;
    Charge total_;
    BlockMap blocks_;
};

inline void check_permutation(std::span<const int> perm, int rank) {
    if (static_cast<int>(perm.size()) != rank)
        throw std::invalid_argument("transpose: permutation length does not match rank");
    std::vector<char> seen(static_cast<size_t>(rank), 0);
    for (int p : perm) {
        if (p < 0 || p >= rank || seen[static_cast<size_t>(p)])
            throw std::invalid_argument("transpose: not a permutation");
        seen[static_cast<size_t>(p)] = 1;
    }
}

// Plain (sign-free) transpose; perm maps new position -> old position.
template <class T>
BlockTensor<T> transpose(const BlockTensor<T> &t, std::span<const int> perm) {
    check_permutation(perm, t.rank());
    std::vector<Index> idx(static_cast<size_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) idx[static_cast<size_t>(i)] = t.index(perm[static_cast<size_t>(i)]);
    BlockTensor<T> out(t.group(), std::move(idx), t.total_charge());
    bool identity = true;
    for (int i = 0; i < t.rank(); ++i)
        if (perm[static_cast<size_t>(i)] != i) identity = false;
    for (const auto &[key, vals] : t.blocks()) {
        typename BlockTensor<T>::Key nkey(key.size());
        for (size_t i = 0; i < key.size(); ++i) nkey[i] = key[static_cast<size_t>(perm[i])];
        if (identity)
            out.blocks().emplace(std::move(nkey), vals);
        else
            out.blocks().emplace(std::move(nkey),
                                 detail::permute_dense(vals, t.block_shape(key), perm));
    }
    return out;
}

template <class T>
BlockTensor<T> transpose(const BlockTensor<T> &t, std::initializer_list<int> perm) {
    return transpose(t, std::span<const int>(perm.begin(), perm.size()));
}

namespace detail {

inline void check_contraction_axes(const auto &a, const auto &b,
                                   const std::vector<std::pair<int, int>> &axes) {
    std::vector<char> ua(static_cast<size_t>(a.rank()), 0), ub(static_cast<size_t>(b.rank()), 0);
    for (auto [pa, pb] : axes) {
        if (pa < 0 || pa >= a.rank() || pb < 0 || pb >= b.rank())
            throw std::invalid_argument("contract: axis out of range");
        if (ua[static_cast<size_t>(pa)] || ub[static_cast<size_t>(pb)])
            throw std::invalid_argument("contract: repeated axis");
        ua[static_cast<size_t>(pa)] = ub[static_cast<size_t>(pb)] = 1;
        const Index &ia = a.index(pa);
        const Index &ib = b.index(pb);
        if (!ia.same_sectors(ib))
            throw std::invalid_argument("contract: sector mismatch on bond " + ia.id());
        if (ia.sign() == ib.sign())
            throw std::invalid_argument("contract: signatures not opposite on bond " + ia.id());
    }
}

} // namespace detail

// Pairwise contraction over the listed axes; result carries a's free legs
// followed by b's free legs and total charge fuse(s(A), s(B)).
template <class T>
BlockTensor<T> contract(const BlockTensor<T> &a, const BlockTensor<T> &b,
                        const std::vector<std::pair<int, int>> &axes) {
    if (a.group() != b.group())
        throw std::invalid_argument("contract: symmetry groups differ");
    detail::check_contraction_axes(a, b, axes);
    const int m = static_cast<int>(axes.size());

    std::vector<int> free_a, free_b, perm_a, perm_b;
    {
        std::vector<char> ca(static_cast<size_t>(a.rank()), 0), cb(static_cast<size_t>(b.rank()), 0);
        for (auto [pa, pb] : axes) { ca[static_cast<size_t>(pa)] = 1; cb[static_cast<size_t>(pb)] = 1; }
        for (int i = 0; i < a.rank(); ++i)
            if (!ca[static_cast<size_t>(i)]) free_a.push_back(i);
        for (int i = 0; i < b.rank(); ++i)
            if (!cb[static_cast<size_t>(i)]) free_b.push_back(i);
    }
    perm_a = free_a;
    for (auto [pa, pb] : axes) perm_a.push_back(pa);
    for (auto [pa, pb] : axes) perm_b.push_back(pb);
    perm_b.insert(perm_b.end(), free_b.begin(), free_b.end());

    BlockTensor<T> at = transpose(a, std::span<const int>(perm_a));
    BlockTensor<T> bt = transpose(b, std::span<const int>(perm_b));

    const int nfa = static_cast<int>(free_a.size());
    const int nfb = static_cast<int>(free_b.size());

    std::vector<Index> out_idx;
    for (int i = 0; i < nfa; ++i) out_idx.push_back(at.index(i));
    for (int i = 0; i < nfb; ++i) out_idx.push_back(bt.index(m + i));
    Charge total = a.group().add(a.total_charge(), b.total_charge());
    BlockTensor<T> out(a.group(), std::move(out_idx), total);

    // group blocks by contracted subkey
    using Key = typename BlockTensor<T>::Key;
    std::map<Key, std::vector<const Key *>> a_by_con, b_by_con;
    for (const auto &[key, vals] : at.blocks()) {
        Key con(key.end() - m, key.end());
        a_by_con[con].push_back(&key);
    }
    for (const auto &[key, vals] : bt.blocks()) {
        Key con(key.begin(), key.begin() + m);
        b_by_con[con].push_back(&key);
    }

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    for (const auto &[con, akeys] : a_by_con) {
        auto itb = b_by_con.find(con);
        if (itb == b_by_con.end()) continue;
        for (const Key *ka : akeys) {
            const auto &adata = *at.find_block(*ka);
            auto ash = at.block_shape(*ka);
            int64_t arows = 1, kdim = 1;
            for (int i = 0; i < nfa; ++i) arows *= ash[static_cast<size_t>(i)];
            for (int i = 0; i < m; ++i) kdim *= ash[static_cast<size_t>(nfa + i)];
            Eigen::Map<const Mat> ma(adata.data(), arows, kdim);
            for (const Key *kb : itb->second) {
                const auto &bdata = *bt.find_block(*kb);
                auto bsh = bt.block_shape(*kb);
                int64_t bcols = 1;
                for (int i = 0; i < nfb; ++i) bcols *= bsh[static_cast<size_t>(m + i)];
                Eigen::Map<const Mat> mb(bdata.data(), kdim, bcols);
                Key okey;
                okey.reserve(static_cast<size_t>(nfa + nfb));
                okey.insert(okey.end(), ka->begin(), ka->begin() + nfa);
                okey.insert(okey.end(), kb->begin() + m, kb->end());
                auto &odata = out.block(okey);
                Eigen::Map<Mat> mo(odata.data(), arows, bcols);
                mo.noalias() += ma * mb;
            }
        }
    }
    out.prune_zeros();
    return out;
}

// --- index fusion -----------------------------------------------------------

// Description of one fused leg: for every fused charge, the ordered list of
// constituent sector combinations with their offsets inside the fused sector.
struct FuseCombo {
    std::vector<int> ords; // sector ordinal per constituent leg
    int64_t offset = 0;
    int64_t extent = 0;
};

struct FuseMap {
    std::vector<Index> parts;                  // original legs, in fuse order
    std::vector<Charge> charges;               // fused sector charges, sorted
    std::vector<int64_t> dims;                 // fused sector dims
    std::vector<std::vector<FuseCombo>> combos; // per fused sector
    Index fused;                               // the fused Index (sign +)

    int sector_of(const Charge &c) const {
        for (size_t i = 0; i < charges.size(); ++i)
            if (charges[i] == c) return static_cast<int>(i);
        return -1;
    }
};

// Build the fuse map for a run of legs. The fused charge of a combination is
// the signed sum of constituent sector charges, so the fused leg carries
// signature '+' while preserving the selection rule.
inline FuseMap make_fuse_map(const SymmetryGroup &g, std::span<const Index> parts,
                             const std::string &fused_id) {
    FuseMap fm;
    fm.parts.assign(parts.begin(), parts.end());
    std::map<Charge, std::vector<FuseCombo>> acc;
    std::vector<int> ord(parts.size(), 0);
    const int n = static_cast<int>(parts.size());
    // lexicographic enumeration over constituent sector ordinals
    while (true) {
        Charge c = g.identity();
        int64_t ext = 1;
        for (int i = 0; i < n; ++i) {
            const Sector &s = parts[static_cast<size_t>(i)].sectors()[static_cast<size_t>(ord[static_cast<size_t>(i)])];
            c = parts[static_cast<size_t>(i)].sign() == Sign::Plus ? g.add(c, s.charge) : g.sub(c, s.charge);
            ext *= s.dim;
        }
        FuseCombo combo;
        combo.ords = ord;
        combo.extent = ext;
        acc[c].push_back(std::move(combo));
        int ax = n - 1;
        for (; ax >= 0; --ax) {
            if (++ord[static_cast<size_t>(ax)] < parts[static_cast<size_t>(ax)].nsectors()) break;
            ord[static_cast<size_t>(ax)] = 0;
        }
        if (ax < 0) break;
        if (n == 0) break;
    }
    std::vector<Sector> fused_sectors;
    for (auto &[c, combos] : acc) {
        int64_t off = 0;
        for (auto &cb : combos) {
            cb.offset = off;
            off += cb.extent;
        }
        fm.charges.push_back(c);
        fm.dims.push_back(off);
        fm.combos.push_back(std::move(combos));
        fused_sectors.push_back(Sector{c, off});
    }
    fm.fused = Index(std::move(fused_sectors), Sign::Plus, fused_id);
    return fm;
}

template <class T> struct FuseResult {
    BlockTensor<T> tensor;
    std::vector<FuseMap> maps; // one per group, in group order
};

// Fuse the legs of t into the given groups (a partition of all positions).
// The groups are first brought together by a plain transpose in group order.
template <class T>
FuseResult<T> fuse_indices(const BlockTensor<T> &t, const std::vector<std::vector<int>> &groups) {
    std::vector<int> order;
    for (const auto &grp : groups) {
        if (grp.empty()) throw std::invalid_argument("fuse_indices: empty group");
        order.insert(order.end(), grp.begin(), grp.end());
    }
    check_permutation(std::span<const int>(order), t.rank());
    BlockTensor<T> tt = transpose(t, std::span<const int>(order));

    FuseResult<T> res;
    std::vector<Index> fused_idx;
    std::vector<int> group_start;
    int pos = 0;
    for (const auto &grp : groups) {
        group_start.push_back(pos);
        std::span<const Index> parts(&tt.indices()[static_cast<size_t>(pos)], grp.size());
        res.maps.push_back(make_fuse_map(t.group(), parts, fresh_bond_id()));
        fused_idx.push_back(res.maps.back().fused);
        pos += static_cast<int>(grp.size());
    }

    BlockTensor<T> out(t.group(), fused_idx, t.total_charge());
    const int ng = static_cast<int>(groups.size());
    for (const auto &[key, vals] : tt.blocks()) {
        auto shape = tt.block_shape(key);
        typename BlockTensor<T>::Key okey(static_cast<size_t>(ng));
        std::vector<int64_t> offsets(static_cast<size_t>(ng)), extents(static_cast<size_t>(ng));
        for (int gi = 0; gi < ng; ++gi) {
            const FuseMap &fm = res.maps[static_cast<size_t>(gi)];
            std::vector<int> sub(key.begin() + group_start[static_cast<size_t>(gi)],
                                 key.begin() + group_start[static_cast<size_t>(gi)] +
                                     static_cast<long>(groups[static_cast<size_t>(gi)].size()));
            // locate combo
            Charge c = t.group().identity();
            int64_t ext = 1;
            for (size_t i = 0; i < sub.size(); ++i) {
                const Index &ix = fm.parts[i];
                const Sector &s = ix.sectors()[static_cast<size_t>(sub[i])];
                c = ix.sign() == Sign::Plus ? t.group().add(c, s.charge) : t.group().sub(c, s.charge);
                ext *= s.dim;
            }
            int fs = fm.sector_of(c);
            okey[static_cast<size_t>(gi)] = fs;
            const auto &combos = fm.combos[static_cast<size_t>(fs)];
            int64_t off = -1;
            for (const auto &cb : combos)
                if (cb.ords == sub) { off = cb.offset; break; }
            offsets[static_cast<size_t>(gi)] = off;
            extents[static_cast<size_t>(gi)] = ext;
        }
        auto &odata = out.block(okey);
        auto oshape = out.block_shape(okey);
        auto ostrides = detail::row_major_strides(oshape);
        // copy block (extent per group, row-major) into the fused rectangle
        std::vector<int64_t> idx(static_cast<size_t>(ng), 0);
        int64_t copied = 0;
        const int64_t inner = extents[static_cast<size_t>(ng - 1)];
        const int64_t total = static_cast<int64_t>(vals.size());
        while (copied < total) {
            int64_t dst = 0;
            for (int gi = 0; gi < ng; ++gi)
                dst += (offsets[static_cast<size_t>(gi)] + idx[static_cast<size_t>(gi)]) * ostrides[static_cast<size_t>(gi)];
            std::copy(vals.begin() + copied, vals.begin() + copied + inner, odata.begin() + dst);
            copied += inner;
            for (int gi = ng - 2; gi >= 0; --gi) {
                if (++idx[static_cast<size_t>(gi)] < extents[static_cast<size_t>(gi)]) break;
                idx[static_cast<size_t>(gi)] = 0;
            }
        }
    }
    res.tensor = std::move(out);
    return res;
}

// Inverse of fuse for one axis; the fused axis is split back into its parts.
template <class T>
BlockTensor<T> unfuse_index(const BlockTensor<T> &t, int axis, const FuseMap &fm) {
    if (!(t.index(axis).same_sectors(fm.fused)))
        throw std::invalid_argument("unfuse_index: axis does not match fuse map");
    std::vector<Index> idx;
    for (int i = 0; i < axis; ++i) idx.push_back(t.index(i));
    for (const auto &p : fm.parts) idx.push_back(t.index(axis).sign() == Sign::Plus ? p : p.dual());
    for (int i = axis + 1; i < t.rank(); ++i) idx.push_back(t.index(i));
    // NOTE: only sign '+' fused axes are produced by fuse_indices; dual fused
    // axes would flip constituent signs, which we support for completeness.
    BlockTensor<T> out(t.group(), std::move(idx), t.total_charge());
    const int npart = static_cast<int>(fm.parts.size());
    for (const auto &[key, vals] : t.blocks()) {
        auto shape = t.block_shape(key);
        int64_t pre = 1, post = 1;
        for (int i = 0; i < axis; ++i) pre *= shape[static_cast<size_t>(i)];
        for (int i = axis + 1; i < t.rank(); ++i) post *= shape[static_cast<size_t>(i)];
        const int64_t fdim = shape[static_cast<size_t>(axis)];
        const int fs = key[static_cast<size_t>(axis)];
        for (const FuseCombo &cb : fm.combos[static_cast<size_t>(fs)]) {
            typename BlockTensor<T>::Key okey;
            okey.insert(okey.end(), key.begin(), key.begin() + axis);
            okey.insert(okey.end(), cb.ords.begin(), cb.ords.end());
            okey.insert(okey.end(), key.begin() + axis + 1, key.end());
            auto &odata = out.block(okey);
            for (int64_t p = 0; p < pre; ++p)
                for (int64_t x = 0; x < cb.extent; ++x)
                    std::copy(vals.begin() + (p * fdim + cb.offset + x) * post,
                              vals.begin() + (p * fdim + cb.offset + x) * post + post,
                              odata.begin() + (p * cb.extent + x) * post);
        }
        (void)npart;
    }
    return out;
}

// --- matrix decompositions ---------------------------------------------------

// Positive diagonal weights on a bond, resolved per charge sector.
struct DiagonalBond {
    std::vector<Charge> charges;
    std::vector<std::vector<double>> values;

    int64_t total_dim() const {
        int64_t n = 0;
        for (const auto &v : values) n += static_cast<int64_t>(v.size());
        return n;
    }

    double max_value() const {
        double m = 0;
        for (const auto &v : values)
            for (double x : v) m = std::max(m, x);
        return m;
    }

    int sector_of(const Charge &c) const {
        for (size_t i = 0; i < charges.size(); ++i)
            if (charges[i] == c) return static_cast<int>(i);
        return -1;
    }

    void scale(double f) {
        for (auto &v : values)
            for (double &x : v) x *= f;
    }
};

// Materialize diagonal weights as a two-leg tensor contractible between the
// factors that created the bond: legs (sign +, charge c) x (sign -, charge c).
template <class T>
BlockTensor<T> diagonal_tensor(const SymmetryGroup &g, const DiagonalBond &d,
                               const std::string &left_id, const std::string &right_id) {
    std::vector<Sector> secs;
    for (size_t i = 0; i < d.charges.size(); ++i)
        secs.push_back(Sector{d.charges[i], static_cast<int64_t>(d.values[i].size())});
    Index left(secs, Sign::Plus, left_id);
    Index right(secs, Sign::Minus, right_id);
    BlockTensor<T> out(g, {left, right}, g.identity());
    for (int s = 0; s < left.nsectors(); ++s) {
        // sector order in the Index is charge-sorted; map back to d's order
        int ds = d.sector_of(left.sectors()[static_cast<size_t>(s)].charge);
        const auto &vals = d.values[static_cast<size_t>(ds)];
        auto &b = out.block({s, s});
        const int64_t n = static_cast<int64_t>(vals.size());
        for (int64_t i = 0; i < n; ++i) b[static_cast<size_t>(i * n + i)] = T(vals[static_cast<size_t>(i)]);
    }
    return out;
}

// Multiply (power of) per-sector diagonal weights into one axis of a tensor.
template <class T>
void scale_axis(BlockTensor<T> &t, int axis, const DiagonalBond &d, double power = 1.0) {
    const Index &ix = t.index(axis);
    auto shape_cache = std::map<typename BlockTensor<T>::Key, int>{};
    for (auto &[key, vals] : t.blocks()) {
        const int ord = key[static_cast<size_t>(axis)];
        int ds = d.sector_of(ix.sectors()[static_cast<size_t>(ord)].charge);
        if (ds < 0)
            throw std::invalid_argument("scale_axis: bond weights missing sector");
        const auto &w = d.values[static_cast<size_t>(ds)];
        auto sh = t.block_shape(key);
        if (static_cast<int64_t>(w.size()) != sh[static_cast<size_t>(axis)])
            throw std::invalid_argument("scale_axis: weight length mismatch");
        int64_t pre = 1, post = 1;
        for (int i = 0; i < axis; ++i) pre *= sh[static_cast<size_t>(i)];
        for (int i = axis + 1; i < t.rank(); ++i) post *= sh[static_cast<size_t>(i)];
        const int64_t dim = sh[static_cast<size_t>(axis)];
        for (int64_t p = 0; p < pre; ++p)
            for (int64_t x = 0; x < dim; ++x) {
                const T f = T(std::pow(w[static_cast<size_t>(x)], power));
                T *base = vals.data() + (p * dim + x) * post;
                for (int64_t q = 0; q < post; ++q) base[q] *= f;
            }
    }
    (void)shape_cache;
}

namespace detail {

// Matricization bookkeeping shared by qr and svd: after transposing rows to
// the front, gather per-charge dense matrices and remember where each block
// landed so factors can be scattered back.
template <class T> struct Matricized {
    struct ChargeBlock {
        Charge row_charge;
        int64_t rows = 0, cols = 0;
        std::vector<T> data; // row-major rows x cols
    };
    FuseMap row_map, col_map;
    std::vector<ChargeBlock> mats; // sorted by row_charge
};

// Fuse map restricted to the sector combinations that actually occur in the
// stored blocks; absent combinations would only contribute zero rows/columns.
template <class T>
FuseMap make_present_fuse_map(const BlockTensor<T> &t, int begin, int end,
                              const std::string &fused_id) {
    const SymmetryGroup &g = t.group();
    FuseMap fm;
    for (int i = begin; i < end; ++i) fm.parts.push_back(t.index(i));
    std::map<Charge, std::map<std::vector<int>, int64_t>> acc; // charge -> ords -> extent
    for (const auto &[key, vals] : t.blocks()) {
        std::vector<int> sub(key.begin() + begin, key.begin() + end);
        Charge c = g.identity();
        int64_t ext = 1;
        for (int i = begin; i < end; ++i) {
            const Index &ix = t.index(i);
            const Sector &s = ix.sectors()[static_cast<size_t>(key[static_cast<size_t>(i)])];
            c = ix.sign() == Sign::Plus ? g.add(c, s.charge) : g.sub(c, s.charge);
            ext *= s.dim;
        }
        acc[c][sub] = ext;
    }
    std::vector<Sector> fused_sectors;
    for (auto &[c, combos] : acc) {
        int64_t off = 0;
        std::vector<FuseCombo> list;
        for (auto &[ords, ext] : combos) {
            list.push_back(FuseCombo{ords, off, ext});
            off += ext;
        }
        fm.charges.push_back(c);
        fm.dims.push_back(off);
        fm.combos.push_back(std::move(list));
        fused_sectors.push_back(Sector{c, off});
    }
    fm.fused = Index(std::move(fused_sectors), Sign::Plus, fused_id);
    return fm;
}

template <class T>
Matricized<T> matricize(const BlockTensor<T> &t, int nrow) {
    Matricized<T> m;
    m.row_map = make_present_fuse_map(t, 0, nrow, "rows");
    m.col_map = make_present_fuse_map(t, nrow, t.rank(), "cols");
    std::map<Charge, typename Matricized<T>::ChargeBlock> acc;
    for (const auto &[key, vals] : t.blocks()) {
        std::vector<int> rsub(key.begin(), key.begin() + nrow);
        std::vector<int> csub(key.begin() + nrow, key.end());
        Charge rc = t.group().identity(), cc = t.group().identity();
        int64_t rext = 1, cext = 1;
        for (int i = 0; i < nrow; ++i) {
            const Index &ix = t.index(i);
            const Sector &s = ix.sectors()[static_cast<size_t>(key[static_cast<size_t>(i)])];
            rc = ix.sign() == Sign::Plus ? t.group().add(rc, s.charge) : t.group().sub(rc, s.charge);
            rext *= s.dim;
        }
        for (int i = nrow; i < t.rank(); ++i) {
            const Index &ix = t.index(i);
            const Sector &s = ix.sectors()[static_cast<size_t>(key[static_cast<size_t>(i)])];
            cc = ix.sign() == Sign::Plus ? t.group().add(cc, s.charge) : t.group().sub(cc, s.charge);
            cext *= s.dim;
        }
        auto &cb = acc[rc];
        if (cb.data.empty()) {
            cb.row_charge = rc;
            int rs = m.row_map.sector_of(rc);
            int cs = m.col_map.sector_of(cc);
            if (rs < 0 || cs < 0) throw std::logic_error("matricize: missing fused sector");
            cb.rows = m.row_map.dims[static_cast<size_t>(rs)];
            cb.cols = m.col_map.dims[static_cast<size_t>(cs)];
            cb.data.assign(static_cast<size_t>(cb.rows * cb.cols), T{});
        }
        int rs = m.row_map.sector_of(rc);
        int cs = m.col_map.sector_of(cc);
        int64_t roff = -1, coff = -1;
        for (const auto &cmb : m.row_map.combos[static_cast<size_t>(rs)])
            if (cmb.ords == rsub) { roff = cmb.offset; break; }
        for (const auto &cmb : m.col_map.combos[static_cast<size_t>(cs)])
            if (cmb.ords == csub) { coff = cmb.offset; break; }
        for (int64_t r = 0; r < rext; ++r)
            std::copy(vals.begin() + r * cext, vals.begin() + (r + 1) * cext,
                      cb.data.begin() + (roff + r) * cb.cols + coff);
    }
    for (auto &[c, cb] : acc) m.mats.push_back(std::move(cb));
    return m;
}

// Scatter a (rows x k) left factor back to blocks keyed by row combos + bond.
template <class T>
void scatter_left(BlockTensor<T> &dst, const FuseMap &row_map, const Charge &row_charge,
                  const std::vector<T> &mat, int64_t rows, int64_t k, int bond_ord) {
    const int rs = row_map.sector_of(row_charge);
    const int nrow_legs = static_cast<int>(row_map.parts.size());
    for (const auto &cmb : row_map.combos[static_cast<size_t>(rs)]) {
        typename BlockTensor<T>::Key key(cmb.ords.begin(), cmb.ords.end());
        key.push_back(bond_ord);
        auto &b = dst.block(key);
        for (int64_t r = 0; r < cmb.extent; ++r)
            std::copy(mat.begin() + (cmb.offset + r) * k, mat.begin() + (cmb.offset + r) * k + k,
                      b.begin() + r * k);
    }
    (void)rows;
    (void)nrow_legs;
}

// Scatter a (k x cols) right factor back to blocks keyed by bond + col combos.
template <class T>
void scatter_right(BlockTensor<T> &dst, const FuseMap &col_map, const Charge &col_charge,
                   const std::vector<T> &mat, int64_t k, int64_t cols, int bond_ord) {
    const int cs = col_map.sector_of(col_charge);
    for (const auto &cmb : col_map.combos[static_cast<size_t>(cs)]) {
        typename BlockTensor<T>::Key key;
        key.push_back(bond_ord);
        key.insert(key.end(), cmb.ords.begin(), cmb.ords.end());
        auto &b = dst.block(key);
        for (int64_t r = 0; r < k; ++r)
            std::copy(mat.begin() + r * cols + cmb.offset,
                      mat.begin() + r * cols + cmb.offset + cmb.extent,
                      b.begin() + r * cmb.extent);
    }
}

} // namespace detail

template <class T> struct QrResult {
    BlockTensor<T> q; // rows + new bond (sign -), carries s(A)
    BlockTensor<T> r; // new bond (sign +) + cols, totally symmetric
};

// Sector-wise economy QR after matricizing the first nrow legs as rows.
// The new bond sector for row charge c_r carries charge c_r - s(A); the R
// diagonal is made nonnegative so the factorization is unique.
template <class T>
QrResult<T> qr(const BlockTensor<T> &t, int nrow, const std::string &bond_id = "") {
    if (nrow < 1 || nrow >= t.rank())
        throw std::invalid_argument("qr: row/column split must be non-empty");
    auto m = detail::matricize(t, nrow);
    const SymmetryGroup &g = t.group();

    std::vector<Sector> bond_sectors;
    for (const auto &cb : m.mats) {
        int64_t k = std::min(cb.rows, cb.cols);
        bond_sectors.push_back(Sector{g.sub(cb.row_charge, t.total_charge()), k});
    }
    std::string id = bond_id.empty() ? fresh_bond_id() : bond_id;
    Index bond_q(bond_sectors, Sign::Minus, id);
    Index bond_r = bond_q.dual();

    std::vector<Index> qidx(t.indices().begin(), t.indices().begin() + nrow);
    qidx.push_back(bond_q);
    std::vector<Index> ridx{bond_r};
    ridx.insert(ridx.end(), t.indices().begin() + nrow, t.indices().end());

    QrResult<T> res{BlockTensor<T>(g, qidx, t.total_charge()),
                    BlockTensor<T>(g, ridx, g.identity())};

    using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    for (const auto &cb : m.mats) {
        const int64_t k = std::min(cb.rows, cb.cols);
        CMat a(cb.rows, cb.cols);
        for (int64_t r = 0; r < cb.rows; ++r)
            for (int64_t c = 0; c < cb.cols; ++c) a(r, c) = cb.data[static_cast<size_t>(r * cb.cols + c)];
        Eigen::HouseholderQR<CMat> dec(a);
        CMat qfull = dec.householderQ() * CMat::Identity(cb.rows, k);
        CMat rfull = dec.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
        // fix the gauge: nonnegative R diagonal
        for (int64_t i = 0; i < k; ++i) {
            T d = rfull(i, i);
            double ad = std::abs(d);
            if (ad > 0) {
                T phase = d / T(ad);
                rfull.row(i) *= detail::conj_val(phase);
                qfull.col(i) *= phase;
            }
        }
        const Charge bq = g.sub(cb.row_charge, t.total_charge());
        const int bond_ord = bond_q.find_sector(bq);
        std::vector<T> qdata(static_cast<size_t>(cb.rows * k));
        for (int64_t r = 0; r < cb.rows; ++r)
            for (int64_t c = 0; c < k; ++c) qdata[static_cast<size_t>(r * k + c)] = qfull(r, c);
        detail::scatter_left(res.q, m.row_map, cb.row_charge, qdata, cb.rows, k, bond_ord);
        const Charge cc = g.sub(t.total_charge(), cb.row_charge);
        std::vector<T> rdata(static_cast<size_t>(k * cb.cols));
        for (int64_t r = 0; r < k; ++r)
            for (int64_t c = 0; c < cb.cols; ++c) rdata[static_cast<size_t>(r * cb.cols + c)] = rfull(r, c);
        detail::scatter_right(res.r, m.col_map, cc, rdata, k, cb.cols, bond_ord);
    }
    res.q.prune_zeros();
    res.r.prune_zeros();
    return res;
}

template <class T> struct SvdResult {
    BlockTensor<T> u;  // rows + new bond (sign -), carries s(A)
    DiagonalBond s;    // kept singular values per bond sector
    BlockTensor<T> vh; // new bond (sign +) + cols, totally symmetric
    double discarded_weight = 0.0;
};

// Globally truncated SVD: the kept values are the chi largest across all
// charge sectors pooled together. Values below rank_floor * max are dropped
// regardless of chi. Ties break on (-value, charge, intra-sector position).
template <class T>
SvdResult<T> svd_truncate(const BlockTensor<T> &t, int nrow,
                          std::optional<int64_t> chi = std::nullopt,
                          const std::string &bond_id = "", double rank_floor = 1e-14) {
    if (nrow < 1 || nrow >= t.rank())
        throw std::invalid_argument("svd_truncate: row/column split must be non-empty");
    if (chi && *chi < 1)
        throw std::invalid_argument("svd_truncate: chi must be >= 1");
    auto m = detail::matricize(t, nrow);
    const SymmetryGroup &g = t.group();
    using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    using RVec = Eigen::VectorXd;

    struct SectorSvd {
        Charge row_charge;
        CMat u, vh;
        RVec s;
    };
    std::vector<SectorSvd> svds;
    struct Entry {
        double value;
        Charge bond_charge;
        int sector; // index into svds
        int pos;
    };
    std::vector<Entry> entries;
    for (const auto &cb : m.mats) {
        CMat a(cb.rows, cb.cols);
        for (int64_t r = 0; r < cb.rows; ++r)
            for (int64_t c = 0; c < cb.cols; ++c) a(r, c) = cb.data[static_cast<size_t>(r * cb.cols + c)];
        Eigen::JacobiSVD<CMat> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
        SectorSvd ss;
        ss.row_charge = cb.row_charge;
        ss.u = dec.matrixU();
        ss.vh = dec.matrixV().adjoint();
        ss.s = dec.singularValues();
        // reproducible sign convention: largest-magnitude entry of each left
        // singular vector is made positive real
        for (int64_t j = 0; j < ss.s.size(); ++j) {
            int64_t imax = 0;
            double best = 0;
            for (int64_t i = 0; i < ss.u.rows(); ++i)
                if (std::abs(ss.u(i, j)) > best) { best = std::abs(ss.u(i, j)); imax = i; }
            if (best > 0) {
                T phase = ss.u(imax, j) / T(best);
                ss.u.col(j) *= detail::conj_val(phase);
                ss.vh.row(j) *= phase;
            }
        }
        const Charge bq = g.sub(cb.row_charge, t.total_charge());
        for (int64_t j = 0; j < ss.s.size(); ++j)
            entries.push_back(Entry{ss.s(j), bq, static_cast<int>(svds.size()), static_cast<int>(j)});
        svds.push_back(std::move(ss));
    }

    std::sort(entries.begin(), entries.end(), [](const Entry &a, const Entry &b) {
        if (a.value != b.value) return a.value > b.value;
        if (a.bond_charge != b.bond_charge) return a.bond_charge < b.bond_charge;
        return a.pos < b.pos;
    });

    double total_w = 0;
    for (const auto &e : entries) total_w += e.value * e.value;
    const double floor_val = entries.empty() ? 0.0 : rank_floor * entries.front().value;
    const int64_t max_keep = chi ? *chi : static_cast<int64_t>(entries.size());

    std::map<int, int64_t> kept_per_sector; // svds index -> kept count (prefix per sector)
    double kept_w = 0;
    int64_t kept = 0;
    std::vector<std::vector<int>> kept_pos(svds.size());
    for (const auto &e : entries) {
        if (kept >= max_keep) break;
        if (e.value <= floor_val) break; // sorted: all following are smaller
        kept_pos[static_cast<size_t>(e.sector)].push_back(e.pos);
        kept_w += e.value * e.value;
        ++kept;
    }
    const double dw = total_w > 0 ? std::max(0.0, (total_w - kept_w) / total_w) : 0.0;

    // pooled selection keeps a prefix of each sector's (descending) spectrum
    std::vector<Sector> bond_sectors;
    SvdResult<T> res;
    struct KeptSector {
        int svd_idx;
        int64_t k;
        Charge bond_charge;
    };
    std::vector<KeptSector> ks;
    for (size_t si = 0; si < svds.size(); ++si) {
        if (kept_pos[si].empty()) continue;
        int64_t k = static_cast<int64_t>(kept_pos[si].size());
        Charge bq = g.sub(svds[si].row_charge, t.total_charge());
        bond_sectors.push_back(Sector{bq, k});
        ks.push_back(KeptSector{static_cast<int>(si), k, bq});
    }
    std::string id = bond_id.empty() ? fresh_bond_id() : bond_id;
    Index bond_u(bond_sectors, Sign::Minus, id);
    Index bond_v = bond_u.dual();

    std::vector<Index> uidx(t.indices().begin(), t.indices().begin() + nrow);
    uidx.push_back(bond_u);
    std::vector<Index> vidx{bond_v};
    vidx.insert(vidx.end(), t.indices().begin() + nrow, t.indices().end());
    res.u = BlockTensor<T>(g, uidx, t.total_charge());
    res.vh = BlockTensor<T>(g, vidx, g.identity());
    res.discarded_weight = dw;

    // DiagonalBond sectors sorted by charge to match the Index layout
    std::sort(ks.begin(), ks.end(),
              [](const KeptSector &a, const KeptSector &b) { return a.bond_charge < b.bond_charge; });
    for (const auto &sec : ks) {
        const SectorSvd &ss = svds[static_cast<size_t>(sec.svd_idx)];
        const int bond_ord = bond_u.find_sector(sec.bond_charge);
        const int64_t k = sec.k;
        std::vector<T> udata(static_cast<size_t>(ss.u.rows() * k));
        for (int64_t r = 0; r < ss.u.rows(); ++r)
            for (int64_t c = 0; c < k; ++c) udata[static_cast<size_t>(r * k + c)] = ss.u(r, c);
        detail::scatter_left(res.u, m.row_map, ss.row_charge, udata, ss.u.rows(), k, bond_ord);
        const Charge cc = g.sub(t.total_charge(), ss.row_charge);
        std::vector<T> vdata(static_cast<size_t>(k * ss.vh.cols()));
        for (int64_t r = 0; r < k; ++r)
            for (int64_t c = 0; c < ss.vh.cols(); ++c)
                vdata[static_cast<size_t>(r * ss.vh.cols() + c)] = ss.vh(r, c);
        detail::scatter_right(res.vh, m.col_map, cc, vdata, k, ss.vh.cols(), bond_ord);
        std::vector<double> svals(static_cast<size_t>(k));
        for (int64_t j = 0; j < k; ++j) svals[static_cast<size_t>(j)] = ss.s(j);
        res.s.charges.push_back(sec.bond_charge);
        res.s.values.push_back(std::move(svals));
    }
    res.u.prune_zeros();
    res.vh.prune_zeros();
    (void)kept_per_sector;
    return res;
}

} // namespace ftn
